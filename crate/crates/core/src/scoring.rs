//! Question x region scoring with group-restricted max-matching.
//!
//! Entity questions are matched only against entity regions, relational
//! questions only against relational regions, and global questions are asked
//! once of the whole image. A question's score is the best yes-probability in
//! its row; ties resolve to the lowest region index.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::cache::{Cache, CacheKey, Namespace};
use crate::error::{Error, Result};
use crate::image_decomp::Region;
use crate::model::{GlobalScore, MatchedScore, Question, RegionRef, ScoreMatrix};

pub trait VqaBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn model_version(&self) -> &str;
    /// Probability in `[0, 1]` that the answer to `question` about `region` is yes.
    fn yes_probability(&self, region: &Region, question: &str) -> Result<f64>;
}

/// Renormalizes yes/no token likelihoods into a yes-probability.
pub fn normalize_yes_probability(p_yes: f64, p_no: f64) -> Result<f64> {
    if !(p_yes.is_finite() && p_no.is_finite()) || p_yes < 0.0 || p_no < 0.0 {
        return Err(Error::InvalidInput(format!(
            "yes/no likelihoods must be finite and non-negative, got ({p_yes}, {p_no})"
        )));
    }
    let total = p_yes + p_no;
    if total <= 0.0 {
        return Err(Error::Degenerate("p(yes) + p(no) is zero".into()));
    }
    Ok(p_yes / total)
}

pub struct Scorer<'a> {
    backend: &'a dyn VqaBackend,
    cache: Option<&'a Cache>,
    concurrency: usize,
}

impl<'a> Scorer<'a> {
    pub fn new(backend: &'a dyn VqaBackend) -> Self {
        Self {
            backend,
            cache: None,
            concurrency: 1,
        }
    }

    pub fn with_cache(mut self, cache: &'a Cache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Maximum number of cells evaluated at once.
    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit.max(1);
        self
    }

    fn cell(&self, region: &Region, question: &str) -> Result<f64> {
        let key = self.cache.map(|_| {
            CacheKey::derive(
                Namespace::Vqa,
                self.backend.backend_id(),
                self.backend.model_version(),
                &[&region.canonical_bytes(), question.as_bytes()],
            )
        });
        if let (Some(cache), Some(key)) = (self.cache, &key) {
            if let Some(p) = cache.get_json::<f64>(key)? {
                return Ok(p);
            }
        }
        let p = self.backend.yes_probability(region, question)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::backend(
                self.backend.backend_id(),
                format!("yes-probability {p} outside [0,1]"),
            ));
        }
        if let (Some(cache), Some(key)) = (self.cache, &key) {
            cache.put_json(key, &p)?;
        }
        Ok(p)
    }

    /// Evaluates every (question, region) cell. The full grid is always
    /// computed so that audits see every value.
    pub fn build_score_matrix(
        &self,
        questions: &[Question],
        regions: &[Region],
    ) -> Result<ScoreMatrix> {
        if questions.is_empty() || regions.is_empty() {
            return Err(Error::InvalidInput(format!(
                "score matrix needs questions and regions (got {} x {})",
                questions.len(),
                regions.len()
            )));
        }
        let cols = regions.len();
        let total = questions.len() * cols;
        let eval = |idx: usize| -> Result<f64> {
            let (i, j) = (idx / cols, idx % cols);
            self.cell(&regions[j], &questions[i].text)
                .map_err(|e| Error::Cell {
                    question: questions[i].text.clone(),
                    region: j,
                    source: Box::new(e),
                })
        };

        let flat: Vec<f64> = if self.concurrency == 1 || total == 1 {
            (0..total).map(eval).collect::<Result<_>>()?
        } else {
            let slots: Vec<Mutex<Option<Result<f64>>>> =
                (0..total).map(|_| Mutex::new(None)).collect();
            let next = AtomicUsize::new(0);
            std::thread::scope(|s| {
                for _ in 0..self.concurrency.min(total) {
                    s.spawn(|| loop {
                        let idx = next.fetch_add(1, Ordering::Relaxed);
                        if idx >= total {
                            break;
                        }
                        *slots[idx].lock().unwrap() = Some(eval(idx));
                    });
                }
            });
            slots
                .into_iter()
                .map(|m| m.into_inner().unwrap().expect("every cell visited"))
                .collect::<Result<_>>()?
        };

        let values = flat.chunks(cols).map(<[f64]>::to_vec).collect();
        let refs = regions
            .iter()
            .map(|r| RegionRef {
                box_index: r.box_index,
                kind: r.kind,
                label: r.label.clone(),
                window: r.window,
            })
            .collect();
        Ok(ScoreMatrix::from_values(
            questions.iter().map(|q| q.text.clone()).collect(),
            refs,
            values,
        ))
    }

    fn score_grouped(
        &self,
        questions: &[Question],
        regions: &[Region],
    ) -> Result<(Vec<MatchedScore>, Option<ScoreMatrix>)> {
        if questions.is_empty() {
            return Ok((Vec::new(), None));
        }
        let m = self.build_score_matrix(questions, regions)?;
        let scores = questions
            .iter()
            .zip(&m.best)
            .map(|(q, b)| MatchedScore {
                question: q.text.clone(),
                score: b.value,
                argmax: b.index,
            })
            .collect();
        Ok((scores, Some(m)))
    }

    /// Scores entity questions against entity regions only.
    pub fn score_entity_questions(
        &self,
        questions: &[Question],
        entity_regions: &[Region],
    ) -> Result<(Vec<MatchedScore>, Option<ScoreMatrix>)> {
        self.score_grouped(questions, entity_regions)
    }

    /// Scores relational questions against relational regions only.
    pub fn score_relational_questions(
        &self,
        questions: &[Question],
        relational_regions: &[Region],
    ) -> Result<(Vec<MatchedScore>, Option<ScoreMatrix>)> {
        self.score_grouped(questions, relational_regions)
    }

    pub fn score_global_questions(
        &self,
        questions: &[Question],
        whole: &Region,
    ) -> Result<Vec<GlobalScore>> {
        questions
            .iter()
            .map(|q| {
                let score = self.cell(whole, &q.text).map_err(|e| Error::Cell {
                    question: q.text.clone(),
                    region: 0,
                    source: Box::new(e),
                })?;
                Ok(GlobalScore {
                    question: q.text.clone(),
                    score,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoxKind, QuestionKind};
    use image::RgbImage;
    use std::collections::HashMap;

    /// Answers from a lookup table keyed by (question, region label).
    struct Table {
        answers: HashMap<(String, String), f64>,
        calls: AtomicUsize,
    }

    impl Table {
        fn new(entries: &[(&str, &str, f64)]) -> Self {
            Self {
                answers: entries
                    .iter()
                    .map(|(q, r, p)| ((q.to_string(), r.to_string()), *p))
                    .collect(),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl VqaBackend for Table {
        fn backend_id(&self) -> &str {
            "table"
        }
        fn model_version(&self) -> &str {
            "1"
        }
        fn yes_probability(&self, region: &Region, question: &str) -> Result<f64> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.answers
                .get(&(question.to_string(), region.label.clone()))
                .copied()
                .ok_or_else(|| Error::backend("table", "no answer"))
        }
    }

    fn region(label: &str, shade: u8, kind: BoxKind, idx: usize) -> Region {
        Region {
            pixels: RgbImage::from_pixel(4, 4, image::Rgb([shade, 0, 0])),
            window: [0, 0, 4, 4],
            kind,
            box_index: idx,
            label: label.into(),
            image_id: "img".into(),
            source: None,
        }
    }

    fn qs(texts: &[&str], kind: QuestionKind) -> Vec<Question> {
        texts.iter().map(|t| Question::new(*t, kind)).collect()
    }

    #[test]
    fn normalize() {
        assert_eq!(normalize_yes_probability(0.6, 0.2).unwrap(), 0.6 / 0.8);
        assert!((normalize_yes_probability(0.6, 0.2).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(normalize_yes_probability(0.3, 0.0).unwrap(), 1.0);
        assert_eq!(normalize_yes_probability(0.5, 0.5).unwrap(), 0.5);
        assert!(matches!(
            normalize_yes_probability(0.0, 0.0),
            Err(Error::Degenerate(_))
        ));
        assert!(normalize_yes_probability(-0.1, 0.5).is_err());
    }

    #[test]
    fn matrix_is_cached_cell_by_cell() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::open(dir.path()).unwrap();
        let mut entries = Vec::new();
        for q in ["q0", "q1"] {
            for (r, p) in [("a", 0.1), ("b", 0.2), ("c", 0.3)] {
                entries.push((q, r, p));
            }
        }
        let backend = Table::new(&entries);
        let regions = vec![
            region("a", 1, BoxKind::Entity, 0),
            region("b", 2, BoxKind::Entity, 1),
            region("c", 3, BoxKind::Entity, 2),
        ];
        let questions = qs(&["q0", "q1"], QuestionKind::Entity);
        let scorer = Scorer::new(&backend).with_cache(&cache);
        let first = scorer.build_score_matrix(&questions, &regions).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 6);
        let second = scorer.build_score_matrix(&questions, &regions).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 6);
        assert_eq!(first, second);
    }

    #[test]
    fn row_max_and_ties() {
        let backend = Table::new(&[
            ("q0", "a", 0.2),
            ("q0", "b", 0.9),
            ("q0", "c", 0.4),
            ("q1", "a", 0.7),
            ("q1", "b", 0.7),
            ("q1", "c", 0.1),
        ]);
        let regions = vec![
            region("a", 1, BoxKind::Entity, 0),
            region("b", 2, BoxKind::Entity, 1),
            region("c", 3, BoxKind::Entity, 2),
        ];
        let (scores, m) = Scorer::new(&backend)
            .score_entity_questions(&qs(&["q0", "q1"], QuestionKind::Entity), &regions)
            .unwrap();
        assert_eq!((scores[0].score, scores[0].argmax), (0.9, 1));
        assert_eq!((scores[1].score, scores[1].argmax), (0.7, 0));
        assert_eq!(m.unwrap().values.len(), 2);
    }

    #[test]
    fn row_wise_max_over_two_questions() {
        let backend = Table::new(&[
            ("q0", "a", 0.1),
            ("q0", "b", 0.8),
            ("q1", "a", 0.5),
            ("q1", "b", 0.2),
        ]);
        let regions = vec![
            region("a", 1, BoxKind::Entity, 0),
            region("b", 2, BoxKind::Entity, 1),
        ];
        let (scores, _) = Scorer::new(&backend)
            .score_entity_questions(&qs(&["q0", "q1"], QuestionKind::Entity), &regions)
            .unwrap();
        assert_eq!(
            scores.iter().map(|s| s.score).collect::<Vec<_>>(),
            vec![0.8, 0.5]
        );
    }

    #[test]
    fn singleton_and_relational_fallback() {
        let backend = Table::new(&[("q", "a", 0.63), ("r", "whole_image", 0.4)]);
        let (s, _) = Scorer::new(&backend)
            .score_entity_questions(
                &qs(&["q"], QuestionKind::Entity),
                &[region("a", 1, BoxKind::Entity, 0)],
            )
            .unwrap();
        assert_eq!(s[0].score, 0.63);
        let (s, _) = Scorer::new(&backend)
            .score_relational_questions(
                &qs(&["r"], QuestionKind::Relational),
                &[region("whole_image", 9, BoxKind::WholeImage, 0)],
            )
            .unwrap();
        assert_eq!(s[0].score, 0.4);
    }

    #[test]
    fn global_questions_are_identity_reads() {
        let backend = Table::new(&[
            ("g0", "whole_image", 1.0),
            ("g1", "whole_image", 0.5),
            ("g2", "whole_image", 0.0),
        ]);
        let whole = region("whole_image", 9, BoxKind::WholeImage, 0);
        let scorer = Scorer::new(&backend);
        let s = scorer
            .score_global_questions(&qs(&["g0", "g1", "g2"], QuestionKind::Global), &whole)
            .unwrap();
        assert_eq!(
            s.iter().map(|g| g.score).collect::<Vec<_>>(),
            vec![1.0, 0.5, 0.0]
        );
        assert!(scorer
            .score_global_questions(&[], &whole)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let backend = Table::new(&[]);
        let scorer = Scorer::new(&backend);
        assert!(scorer
            .build_score_matrix(&[], &[region("a", 1, BoxKind::Entity, 0)])
            .is_err());
        assert!(scorer
            .build_score_matrix(&qs(&["q"], QuestionKind::Entity), &[])
            .is_err());
    }

    #[test]
    fn failing_cell_names_the_pair() {
        let backend = Table::new(&[("q", "a", 0.5)]);
        let err = Scorer::new(&backend)
            .build_score_matrix(
                &qs(&["q"], QuestionKind::Entity),
                &[
                    region("a", 1, BoxKind::Entity, 0),
                    region("b", 2, BoxKind::Entity, 1),
                ],
            )
            .unwrap_err();
        assert!(matches!(err, Error::Cell { region: 1, .. }), "{err}");
    }

    #[test]
    fn concurrent_matrix_matches_sequential() {
        let mut entries = Vec::new();
        let names: Vec<String> = (0..7).map(|j| format!("r{j}")).collect();
        let qtexts: Vec<String> = (0..5).map(|i| format!("q{i}")).collect();
        for (i, q) in qtexts.iter().enumerate() {
            for (j, r) in names.iter().enumerate() {
                entries.push((q.as_str(), r.as_str(), ((i * 7 + j) % 10) as f64 / 10.0));
            }
        }
        let backend = Table::new(&entries);
        let regions: Vec<_> = names
            .iter()
            .enumerate()
            .map(|(j, n)| region(n, j as u8, BoxKind::Relational, j))
            .collect();
        let questions: Vec<_> = qtexts
            .iter()
            .map(|t| Question::new(t.clone(), QuestionKind::Relational))
            .collect();
        let seq = Scorer::new(&backend)
            .build_score_matrix(&questions, &regions)
            .unwrap();
        let par = Scorer::new(&backend)
            .with_concurrency(4)
            .build_score_matrix(&questions, &regions)
            .unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn out_of_range_backend_output_is_rejected() {
        let backend = Table::new(&[("q", "a", 1.2)]);
        let err = Scorer::new(&backend)
            .build_score_matrix(
                &qs(&["q"], QuestionKind::Entity),
                &[region("a", 1, BoxKind::Entity, 0)],
            )
            .unwrap_err();
        assert!(matches!(err, Error::Cell { .. }));
    }
}
