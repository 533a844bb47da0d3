//! The small prompt grammar understood by the oracle backends.
//!
//! ```text
//! prompt    := phrase (link phrase)*
//! phrase    := ("a" | "an" | "the") word+          last word is the noun
//! link      := "and" | "left of" | "right of" | "above" | "below" | "next to"
//! ```
//!
//! Words before the noun are attributes. Questions are rendered in fixed
//! yes/no templates and parsed back by [`parse_question`].

use serde::{Deserialize, Serialize};

use super::scene::{Color, Texture};
use crate::error::{Error, Result};
use crate::model::{Question, QuestionKind, QuestionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    LeftOf,
    RightOf,
    Above,
    Below,
    NextTo,
}

impl Predicate {
    pub const ALL: [Predicate; 5] = [
        Predicate::LeftOf,
        Predicate::RightOf,
        Predicate::Above,
        Predicate::Below,
        Predicate::NextTo,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Predicate::LeftOf => "left of",
            Predicate::RightOf => "right of",
            Predicate::Above => "above",
            Predicate::Below => "below",
            Predicate::NextTo => "next to",
        }
    }

    pub fn inverse(self) -> Predicate {
        match self {
            Predicate::LeftOf => Predicate::RightOf,
            Predicate::RightOf => Predicate::LeftOf,
            Predicate::Above => Predicate::Below,
            Predicate::Below => Predicate::Above,
            Predicate::NextTo => Predicate::NextTo,
        }
    }

    pub fn is_symmetric(self) -> bool {
        self == Predicate::NextTo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    And,
    Spatial(Predicate),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phrase {
    /// The phrase as written, e.g. `a red square`.
    pub text: String,
    pub attributes: Vec<String>,
    pub noun: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub text: String,
    pub phrases: Vec<Phrase>,
    /// `links[i]` joins `phrases[i]` and `phrases[i + 1]`.
    pub links: Vec<Link>,
}

/// Trims whitespace and a single trailing period.
pub fn normalize_prompt(text: &str) -> String {
    let t = text.trim();
    t.strip_suffix('.').unwrap_or(t).trim_end().to_string()
}

fn take_link(words: &[&str], i: usize) -> Option<(Link, usize)> {
    let w = words[i];
    let next = words.get(i + 1).copied();
    match (w, next) {
        ("and", _) => Some((Link::And, 1)),
        ("left", Some("of")) => Some((Link::Spatial(Predicate::LeftOf), 2)),
        ("right", Some("of")) => Some((Link::Spatial(Predicate::RightOf), 2)),
        ("above", _) => Some((Link::Spatial(Predicate::Above), 1)),
        ("below", _) => Some((Link::Spatial(Predicate::Below), 1)),
        ("next", Some("to")) => Some((Link::Spatial(Predicate::NextTo), 2)),
        _ => None,
    }
}

pub fn parse_prompt(text: &str) -> Result<ParsedPrompt> {
    let norm = normalize_prompt(text);
    let lower = norm.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    let unsupported = || Error::UnsupportedPrompt(text.to_string());
    let mut phrases = Vec::new();
    let mut links = Vec::new();
    let mut i = 0;
    loop {
        if !matches!(words.get(i), Some(&("a" | "an" | "the"))) {
            return Err(unsupported());
        }
        let start = i;
        i += 1;
        let body_start = i;
        while i < words.len() && take_link(&words, i).is_none() {
            i += 1;
        }
        if i == body_start {
            return Err(unsupported());
        }
        let body = &words[body_start..i];
        let attributes = &body[..body.len() - 1];
        let known_attribute =
            |a: &&str| Color::from_name(a).is_some() || Texture::from_name(a).is_some();
        if !attributes.iter().all(known_attribute) {
            return Err(unsupported());
        }
        phrases.push(Phrase {
            text: words[start..i].join(" "),
            attributes: body[..body.len() - 1]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            noun: body[body.len() - 1].to_string(),
        });
        if i == words.len() {
            break;
        }
        let (link, used) = take_link(&words, i).expect("loop stopped on a link");
        links.push(link);
        i += used;
    }
    Ok(ParsedPrompt {
        text: norm,
        phrases,
        links,
    })
}

/// Deterministic decomposition of a grammar prompt: one entity question per
/// (attribute, object), one relational question per link, one global
/// question for the whole prompt.
pub fn question_set_for(prompt_id: &str, text: &str) -> Result<QuestionSet> {
    let p = parse_prompt(text)?;
    let mut assertions: Vec<String> = p.phrases.iter().map(|ph| ph.text.clone()).collect();
    let mut entity = Vec::new();
    for (ai, ph) in p.phrases.iter().enumerate() {
        let texts: Vec<String> = if ph.attributes.is_empty() {
            vec![format!("Is this a {}?", ph.noun)]
        } else {
            ph.attributes
                .iter()
                .map(|a| format!("Is this {} {a}?", ph.noun))
                .collect()
        };
        for t in texts {
            entity.push(Question {
                text: t,
                kind: QuestionKind::Entity,
                assertion_index: Some(ai),
                subject_entities: vec![ph.noun.clone()],
            });
        }
    }
    let mut relational = Vec::new();
    for (li, link) in p.links.iter().enumerate() {
        let (a, b) = (&p.phrases[li].noun, &p.phrases[li + 1].noun);
        let (assertion, question) = match link {
            Link::And => (
                format!("the {a} and the {b} are both present"),
                format!("Are the {a} and the {b} both present?"),
            ),
            Link::Spatial(pred) => (
                format!("the {a} is {} the {b}", pred.phrase()),
                format!("Is the {a} {} the {b}?", pred.phrase()),
            ),
        };
        assertions.push(assertion);
        relational.push(Question {
            text: question,
            kind: QuestionKind::Relational,
            assertion_index: Some(assertions.len() - 1),
            subject_entities: vec![a.clone(), b.clone()],
        });
    }
    let global = vec![Question {
        text: format!("Does this image show {}?", p.text),
        kind: QuestionKind::Global,
        assertion_index: None,
        subject_entities: Vec::new(),
    }];
    Ok(QuestionSet {
        prompt_id: prompt_id.to_string(),
        assertions,
        entity,
        relational,
        global,
    })
}

/// A question as understood by the oracle VQA backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    Presence {
        noun: String,
    },
    Attribute {
        noun: String,
        attribute: String,
    },
    Relation {
        subject: String,
        predicate: Predicate,
        object: String,
    },
    CoPresence {
        a: String,
        b: String,
    },
    Whole(ParsedPrompt),
}

pub fn parse_question(text: &str) -> Result<Query> {
    let bad = || Error::Parse(format!("oracle cannot parse question {text:?}"));
    let t = text.trim();
    if let Some(rest) = t
        .strip_prefix("Does this image show ")
        .and_then(|r| r.strip_suffix('?'))
    {
        return parse_prompt(rest).map(Query::Whole).map_err(|_| bad());
    }
    if let Some(rest) = t
        .strip_prefix("Are the ")
        .and_then(|r| r.strip_suffix(" both present?"))
    {
        let (a, b) = rest.split_once(" and the ").ok_or_else(bad)?;
        return Ok(Query::CoPresence {
            a: a.to_string(),
            b: b.to_string(),
        });
    }
    if let Some(rest) = t
        .strip_prefix("Is this a ")
        .and_then(|r| r.strip_suffix('?'))
    {
        return Ok(Query::Presence {
            noun: rest.to_string(),
        });
    }
    if let Some(rest) = t.strip_prefix("Is this ").and_then(|r| r.strip_suffix('?')) {
        let (noun, attribute) = rest.split_once(' ').ok_or_else(bad)?;
        return Ok(Query::Attribute {
            noun: noun.to_string(),
            attribute: attribute.to_string(),
        });
    }
    if let Some(rest) = t.strip_prefix("Is the ").and_then(|r| r.strip_suffix('?')) {
        for pred in Predicate::ALL {
            let sep = format!(" {} the ", pred.phrase());
            if let Some((subject, object)) = rest.split_once(&sep) {
                return Ok(Query::Relation {
                    subject: subject.to_string(),
                    predicate: pred,
                    object: object.to_string(),
                });
            }
        }
    }
    Err(bad())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_objects_with_relation() {
        let qs = question_set_for("p", "a red square left of a blue circle").unwrap();
        assert_eq!(qs.counts(), (2, 1, 1));
        assert_eq!(qs.relational[0].text, "Is the square left of the circle?");
        assert!(qs.violations().is_empty());
    }

    #[test]
    fn single_object() {
        let qs = question_set_for("p", "a green triangle").unwrap();
        assert_eq!(qs.counts(), (1, 0, 1));
        assert_eq!(qs.entity[0].text, "Is this triangle green?");
    }

    #[test]
    fn apple_and_car() {
        let qs = question_set_for("p", "a red apple and a blue car").unwrap();
        let e: Vec<_> = qs.entity.iter().map(|q| q.text.as_str()).collect();
        assert_eq!(e, ["Is this apple red?", "Is this car blue?"]);
        assert_eq!(
            qs.relational[0].text,
            "Are the apple and the car both present?"
        );
        assert_eq!(
            qs.global[0].text,
            "Does this image show a red apple and a blue car?"
        );
    }

    #[test]
    fn non_grammar_is_unsupported() {
        assert!(matches!(
            parse_prompt("hello"),
            Err(Error::UnsupportedPrompt(_))
        ));
        assert!(parse_prompt("a").is_err());
        assert!(parse_prompt("a cat riding a bicycle").is_err());
        assert!(parse_prompt("a red square and").is_err());
    }

    #[test]
    fn questions_parse_back() {
        let qs = question_set_for(
            "p",
            "a red striped square above a circle and a blue triangle",
        )
        .unwrap();
        for q in qs.entity.iter().chain(&qs.relational).chain(&qs.global) {
            parse_question(&q.text).unwrap();
        }
        assert_eq!(
            parse_question("Is this square striped?").unwrap(),
            Query::Attribute {
                noun: "square".into(),
                attribute: "striped".into()
            }
        );
        assert_eq!(
            parse_question("Is this a circle?").unwrap(),
            Query::Presence {
                noun: "circle".into()
            }
        );
        assert!(parse_question("What color is it?").is_err());
    }
}
