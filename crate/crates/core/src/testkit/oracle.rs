//! Ground-truth stand-ins for the three model backends.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::grammar::{parse_question, question_set_for, Query};
use super::render::{read_annotations, sidecar_path, Annotation};
use super::scene::{predicate_holds, prompt_holds, Rect, SceneObject, Shape};
use crate::error::{Error, Result};
use crate::image_decomp::{Detection, DetectorBackend, LoadedImage, Region};
use crate::model::QuestionSet;
use crate::question_gen::{to_generator_json, GeneratorBackend, ANSWER_MARKER, TARGET_MARKER};
use crate::scoring::VqaBackend;

pub const ORACLE_VERSION: &str = "1";

/// Grammar-driven decomposition of a prompt.
pub fn oracle_question_gen(prompt_text: &str) -> Result<QuestionSet> {
    question_set_for("", prompt_text)
}

/// Answers generation requests by decomposing the target prompt with the
/// grammar. Prompts outside the grammar get a prose refusal, which the
/// parser rejects.
#[derive(Debug, Default, Clone)]
pub struct OracleGenerator;

impl GeneratorBackend for OracleGenerator {
    fn backend_id(&self) -> &str {
        "oracle-generator"
    }

    fn model_version(&self) -> &str {
        ORACLE_VERSION
    }

    fn complete(&self, request: &str) -> Result<String> {
        let start = request
            .rfind(TARGET_MARKER)
            .map(|i| i + TARGET_MARKER.len())
            .ok_or_else(|| Error::backend(self.backend_id(), "request has no target prompt"))?;
        let rest = &request[start..];
        let end = rest.find(ANSWER_MARKER).unwrap_or(rest.len());
        match oracle_question_gen(&rest[..end]) {
            Ok(qs) => Ok(to_generator_json(&qs).to_string()),
            Err(Error::UnsupportedPrompt(p)) => {
                Ok(format!("I can only decompose shape prompts, not {p:?}."))
            }
            Err(e) => Err(e),
        }
    }
}

/// Reads `<image>.boxes.json` next to the image file.
#[derive(Debug, Default, Clone)]
pub struct OracleDetector;

impl DetectorBackend for OracleDetector {
    fn backend_id(&self) -> &str {
        "oracle-detector"
    }

    fn model_version(&self) -> &str {
        ORACLE_VERSION
    }

    fn detect(&self, image: &LoadedImage) -> Result<Vec<Detection>> {
        let path = image.path.as_deref().ok_or_else(|| {
            Error::backend(
                self.backend_id(),
                format!("image {} has no source path", image.id),
            )
        })?;
        let sidecar = sidecar_path(path);
        let bytes = std::fs::read(&sidecar).map_err(|e| {
            Error::backend(self.backend_id(), format!("{}: {e}", sidecar.display()))
        })?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::backend(self.backend_id(), format!("{}: {e}", sidecar.display())))
    }
}

/// Answers questions from ground-truth annotations of the objects that
/// fall inside the region.
#[derive(Debug, Default, Clone)]
pub struct OracleVqa {
    soft: bool,
    annotations: Arc<Mutex<HashMap<PathBuf, Arc<Vec<Annotation>>>>>,
}

impl OracleVqa {
    pub fn hard() -> Self {
        Self::default()
    }

    /// Answers 0.95 / 0.05 instead of 1 / 0.
    pub fn soft() -> Self {
        Self {
            soft: true,
            ..Self::default()
        }
    }

    fn load(&self, path: &Path) -> Result<Arc<Vec<Annotation>>> {
        if let Some(a) = self.annotations.lock().expect("annotation lock").get(path) {
            return Ok(a.clone());
        }
        let ann =
            Arc::new(read_annotations(path).map_err(|e| {
                Error::backend(self.backend_id(), format!("{}: {e}", path.display()))
            })?);
        self.annotations
            .lock()
            .expect("annotation lock")
            .insert(path.to_path_buf(), ann.clone());
        Ok(ann)
    }

    fn answer(&self, yes: bool) -> f64 {
        match (yes, self.soft) {
            (true, false) => 1.0,
            (false, false) => 0.0,
            (true, true) => 0.95,
            (false, true) => 0.05,
        }
    }
}

/// Objects at least half of whose box lies inside `window`.
pub fn objects_in_window(annotations: &[Annotation], window: [u32; 4]) -> Vec<SceneObject> {
    let w = Rect::new(window[0], window[1], window[2], window[3]);
    annotations
        .iter()
        .filter_map(|a| {
            let rect = Rect::new(a.x0, a.y0, a.x1, a.y1);
            let shape = Shape::from_name(&a.label)?;
            (2 * rect.intersection_area(&w) >= rect.area())
                .then(|| SceneObject::new(shape, a.color, a.texture, rect))
        })
        .collect()
}

fn is_shape(o: &SceneObject, noun: &str) -> bool {
    Shape::from_name(noun) == Some(o.shape)
}

/// Evaluates a parsed question against the objects visible in a region.
/// Unknown nouns or attributes are simply absent, so the answer is no.
pub fn query_holds(query: &Query, objects: &[SceneObject]) -> bool {
    match query {
        Query::Presence { noun } => objects.iter().any(|o| is_shape(o, noun)),
        Query::Attribute { noun, attribute } => objects
            .iter()
            .any(|o| is_shape(o, noun) && o.has_attribute(attribute).unwrap_or(false)),
        Query::CoPresence { a, b } => {
            objects.iter().any(|o| is_shape(o, a))
                && objects.iter().any(|o| is_shape(o, b))
                && (a != b || objects.iter().filter(|o| is_shape(o, a)).count() >= 2)
        }
        Query::Relation {
            subject,
            predicate,
            object,
        } => objects.iter().enumerate().any(|(i, s)| {
            is_shape(s, subject)
                && objects.iter().enumerate().any(|(j, o)| {
                    i != j && is_shape(o, object) && predicate_holds(*predicate, &s.rect, &o.rect)
                })
        }),
        Query::Whole(prompt) => {
            let refs: Vec<&SceneObject> = objects.iter().collect();
            prompt_holds(prompt, &refs).unwrap_or(false)
        }
    }
}

impl VqaBackend for OracleVqa {
    fn backend_id(&self) -> &str {
        if self.soft {
            "oracle-vqa-soft"
        } else {
            "oracle-vqa"
        }
    }

    fn model_version(&self) -> &str {
        ORACLE_VERSION
    }

    fn yes_probability(&self, region: &Region, question: &str) -> Result<f64> {
        let query = parse_question(question)
            .map_err(|e| Error::backend(self.backend_id(), e.to_string()))?;
        let source = region.source.as_deref().ok_or_else(|| {
            Error::backend(
                self.backend_id(),
                format!("region of {} has no source path", region.image_id),
            )
        })?;
        let ann = self.load(source)?;
        let objects = objects_in_window(&ann, region.window);
        Ok(self.answer(query_holds(&query, &objects)))
    }
}
