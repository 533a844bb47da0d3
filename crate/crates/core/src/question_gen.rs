//! Prompt decomposition through a text-generation backend.
//!
//! The backend receives an instruction, two worked exemplars and the target
//! prompt, and must answer with one JSON object:
//!
//! ```json
//! {"assertions": ["..."],
//!  "entity_questions": [{"question": "...", "assertion_index": 0, "entities": ["..."]}],
//!  "relational_questions": [...],
//!  "global_questions": [...]}
//! ```
//!
//! Question items may also be bare strings. Invalid output is sent back with
//! the list of problems appended, up to `max_retries` times.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cache::{Cache, CacheKey, Namespace};
use crate::error::{Error, Result};
use crate::model::{PromptRecord, Question, QuestionKind, QuestionSet};

/// Marks the target prompt inside a request. Backends that need to locate
/// the prompt (the oracle does) search for the last occurrence.
pub const TARGET_MARKER: &str = "Now decompose the following prompt.\nPrompt: ";
pub const ANSWER_MARKER: &str = "\nJSON:";

pub trait GeneratorBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn model_version(&self) -> &str;
    fn complete(&self, request: &str) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub prompt: String,
    pub output: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTemplate {
    pub template_id: String,
    pub version: String,
    pub instruction_text: String,
    pub exemplars: Vec<Exemplar>,
}

const DEFAULT_INSTRUCTION: &str = "\
You turn an image-generation prompt into yes/no questions that check whether an image matches it.

1. Split the prompt into short, self-contained assertions.
2. For every object, write entity questions about that object alone, one per attribute \
(color, shape, texture, material, count). Each mentions exactly one entity.
3. For every relation or interaction between two objects, write one relational question \
that mentions both entities.
4. Write 1 to 3 global questions about the prompt as a whole.

Every question must be answerable with yes or no and start with Is, Are, Does or Do. \
Use assertion_index to point at the assertion a question came from.

Answer with a single JSON object and nothing else. Required keys: \
\"assertions\" (list of strings), \"entity_questions\", \"relational_questions\", \
\"global_questions\" (lists of {\"question\": string, \"assertion_index\": integer, \
\"entities\": list of strings}).";

impl GenerationTemplate {
    /// The shipped two-shot template.
    pub fn default_two_shot() -> Self {
        let ex1 = json!({
            "assertions": ["a black cat", "a wooden chair", "the cat is sitting on the chair"],
            "entity_questions": [
                {"question": "Is this cat black?", "assertion_index": 0, "entities": ["cat"]},
                {"question": "Is this chair wooden?", "assertion_index": 1, "entities": ["chair"]}
            ],
            "relational_questions": [
                {"question": "Is the cat sitting on the chair?", "assertion_index": 2, "entities": ["cat", "chair"]}
            ],
            "global_questions": [
                {"question": "Does this image show a black cat sitting on a wooden chair?", "entities": []}
            ]
        });
        let ex2 = json!({
            "assertions": [
                "a yellow bus",
                "a red brick house",
                "the bus is parked to the left of the house"
            ],
            "entity_questions": [
                {"question": "Is this bus yellow?", "assertion_index": 0, "entities": ["bus"]},
                {"question": "Is this house red?", "assertion_index": 1, "entities": ["house"]},
                {"question": "Is this house made of brick?", "assertion_index": 1, "entities": ["house"]}
            ],
            "relational_questions": [
                {"question": "Is the bus parked to the left of the house?", "assertion_index": 2, "entities": ["bus", "house"]}
            ],
            "global_questions": [
                {"question": "Does this image show a yellow bus parked to the left of a red brick house?", "entities": []},
                {"question": "Is this a street scene?", "entities": []}
            ]
        });
        Self {
            template_id: "compositional-qgen".into(),
            version: "1".into(),
            instruction_text: DEFAULT_INSTRUCTION.into(),
            exemplars: vec![
                Exemplar {
                    prompt: "a black cat sitting on a wooden chair".into(),
                    output: ex1,
                },
                Exemplar {
                    prompt: "a yellow bus parked to the left of a red brick house".into(),
                    output: ex2,
                },
            ],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if t.template_id.trim().is_empty() || t.version.trim().is_empty() {
            return Err(Error::Config(format!(
                "{}: template_id and version are required",
                path.display()
            )));
        }
        Ok(t)
    }
}

/// Instruction, exemplars in order, then the target prompt. The prompt is
/// embedded verbatim.
pub fn build_generation_request(
    prompt_text: &str,
    template: &GenerationTemplate,
) -> Result<String> {
    if prompt_text.trim().is_empty() {
        return Err(Error::InvalidInput("empty prompt".into()));
    }
    let mut out = String::new();
    out.push_str(template.instruction_text.trim_end());
    out.push_str("\n\n");
    for (i, ex) in template.exemplars.iter().enumerate() {
        out.push_str(&format!(
            "Example {}\nPrompt: {}{}\n{}\n\n",
            i + 1,
            ex.prompt,
            ANSWER_MARKER,
            serde_json::to_string_pretty(&ex.output)?
        ));
    }
    out.push_str(TARGET_MARKER);
    out.push_str(prompt_text);
    out.push_str(ANSWER_MARKER);
    Ok(out)
}

fn repair_request(base: &str, problems: &[String]) -> String {
    let mut out = String::from(base);
    out.push_str("\n\nYour previous answer could not be used:\n");
    for p in problems {
        out.push_str("- ");
        out.push_str(p);
        out.push('\n');
    }
    out.push_str(
        "Answer again with a single JSON object with keys assertions, entity_questions, \
         relational_questions and global_questions, and nothing else.",
    );
    out
}

/// First JSON object embedded anywhere in `raw`.
fn first_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    for (i, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

fn parse_questions(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    kind: QuestionKind,
    problems: &mut Vec<String>,
) -> Vec<Question> {
    let Some(v) = obj.get(key) else {
        problems.push(format!("missing key {key:?}"));
        return Vec::new();
    };
    let Some(items) = v.as_array() else {
        problems.push(format!("{key:?} must be a list"));
        return Vec::new();
    };
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        match item {
            Value::String(s) => out.push(Question::new(s.trim(), kind)),
            Value::Object(o) => {
                let Some(text) = o.get("question").and_then(Value::as_str) else {
                    problems.push(format!("{key}[{i}] has no string \"question\""));
                    continue;
                };
                let assertion_index = match o.get("assertion_index") {
                    None | Some(Value::Null) => None,
                    Some(v) => match v.as_u64() {
                        Some(n) => Some(n as usize),
                        None => {
                            problems.push(format!(
                                "{key}[{i}].assertion_index must be a non-negative integer"
                            ));
                            None
                        }
                    },
                };
                let subject_entities = match o.get("entities") {
                    None | Some(Value::Null) => Vec::new(),
                    Some(Value::Array(es)) => es
                        .iter()
                        .filter_map(|e| match e.as_str() {
                            Some(s) => Some(s.to_string()),
                            None => {
                                problems.push(format!("{key}[{i}].entities must contain strings"));
                                None
                            }
                        })
                        .collect(),
                    Some(_) => {
                        problems.push(format!("{key}[{i}].entities must be a list"));
                        Vec::new()
                    }
                };
                out.push(Question {
                    text: text.trim().to_string(),
                    kind,
                    assertion_index,
                    subject_entities,
                });
            }
            _ => problems.push(format!("{key}[{i}] must be a string or an object")),
        }
    }
    out
}

/// Extracts and validates the first JSON object in a backend response.
/// The returned set has an empty `prompt_id`.
pub fn parse_generator_output(raw: &str) -> Result<QuestionSet> {
    let obj = first_json_object(raw)
        .ok_or_else(|| Error::Parse("no JSON object found in backend output".into()))?;
    let mut problems = Vec::new();
    let assertions = match obj.get("assertions") {
        None => {
            problems.push("missing key \"assertions\"".to_string());
            Vec::new()
        }
        Some(Value::Array(a)) => a
            .iter()
            .enumerate()
            .filter_map(|(i, v)| match v.as_str() {
                Some(s) => Some(s.to_string()),
                None => {
                    problems.push(format!("assertions[{i}] must be a string"));
                    None
                }
            })
            .collect(),
        Some(_) => {
            problems.push("\"assertions\" must be a list".to_string());
            Vec::new()
        }
    };
    let entity = parse_questions(
        &obj,
        "entity_questions",
        QuestionKind::Entity,
        &mut problems,
    );
    let relational = parse_questions(
        &obj,
        "relational_questions",
        QuestionKind::Relational,
        &mut problems,
    );
    let global = parse_questions(
        &obj,
        "global_questions",
        QuestionKind::Global,
        &mut problems,
    );
    let qs = QuestionSet {
        prompt_id: String::new(),
        assertions,
        entity,
        relational,
        global,
    };
    if problems.is_empty() {
        problems = qs.violations();
    }
    if problems.is_empty() {
        Ok(qs)
    } else {
        Err(Error::Schema(problems))
    }
}

/// Inverse of [`parse_generator_output`]: the wire JSON for a question set.
pub fn to_generator_json(qs: &QuestionSet) -> Value {
    let items = |qs: &[Question]| -> Value {
        qs.iter()
            .map(|q| {
                let mut o = json!({"question": q.text, "entities": q.subject_entities});
                if let Some(a) = q.assertion_index {
                    o["assertion_index"] = json!(a);
                }
                o
            })
            .collect()
    };
    json!({
        "assertions": qs.assertions,
        "entity_questions": items(&qs.entity),
        "relational_questions": items(&qs.relational),
        "global_questions": items(&qs.global),
    })
}

pub fn decomposition_cache_key(
    backend: &dyn GeneratorBackend,
    template: &GenerationTemplate,
    prompt_text: &str,
) -> CacheKey {
    CacheKey::derive(
        Namespace::Qgen,
        backend.backend_id(),
        backend.model_version(),
        &[
            template.template_id.as_bytes(),
            template.version.as_bytes(),
            prompt_text.as_bytes(),
        ],
    )
}

/// Decomposes a prompt, consulting the cache first. Invalid backend output
/// is retried with a repair note; transport errors are returned at once.
pub fn decompose_prompt(
    prompt: &PromptRecord,
    backend: &dyn GeneratorBackend,
    template: &GenerationTemplate,
    max_retries: usize,
    cache: Option<&Cache>,
) -> Result<QuestionSet> {
    let key = cache.map(|_| decomposition_cache_key(backend, template, &prompt.text));
    if let (Some(cache), Some(key)) = (cache, &key) {
        if let Some(mut qs) = cache.get_json::<QuestionSet>(key)? {
            qs.prompt_id = prompt.id.clone();
            return Ok(qs);
        }
    }

    let base = build_generation_request(&prompt.text, template)?;
    let mut request = base.clone();
    let mut last_raw = String::new();
    let mut reason = String::new();
    for attempt in 0..=max_retries {
        let raw = backend.complete(&request)?;
        match parse_generator_output(&raw) {
            Ok(mut qs) => {
                if let (Some(cache), Some(key)) = (cache, &key) {
                    cache.put_json(key, &qs)?;
                }
                qs.prompt_id = prompt.id.clone();
                return Ok(qs);
            }
            Err(e) => {
                let problems = match &e {
                    Error::Schema(v) => v.clone(),
                    other => vec![other.to_string()],
                };
                log::debug!(
                    "decomposition attempt {} for {:?} rejected: {e}",
                    attempt + 1,
                    prompt.id
                );
                reason = e.to_string();
                last_raw = raw;
                request = repair_request(&base, &problems);
            }
        }
    }
    Err(Error::Decomposition {
        attempts: max_retries + 1,
        reason,
        last_raw,
    })
}
