//! Shared domain types.
//!
//! Everything here is a plain value object with a canonical snake_case JSON
//! encoding. The file formats used by the harness and the CLI are built out
//! of these encodings.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::aggregation::EmptyGroupRule;

/// Benchmark sub-category of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Color,
    Shape,
    Texture,
    Spatial,
    NonSpatial,
    Complex,
    Other,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Color,
        Category::Shape,
        Category::Texture,
        Category::Spatial,
        Category::NonSpatial,
        Category::Complex,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Color => "color",
            Category::Shape => "shape",
            Category::Texture => "texture",
            Category::Spatial => "spatial",
            Category::NonSpatial => "non_spatial",
            Category::Complex => "complex",
            Category::Other => "other",
        }
    }

    /// Case-insensitive lookup that also accepts `-` or space in place of `_`.
    /// Returns `None` for names outside the vocabulary.
    pub fn from_name(name: &str) -> Option<Category> {
        let norm = name.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Category::ALL.into_iter().find(|c| c.as_str() == norm)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub text: String,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_score: Option<f64>,
}

impl PromptRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, category: Category) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            category,
            human_score: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyId { index: usize },
    DuplicateId { id: String },
    EmptyText { id: String },
    HumanScoreOutOfRange { id: String, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId { index } => write!(f, "record #{index} has an empty id"),
            Violation::DuplicateId { id } => write!(f, "duplicate id {id:?}"),
            Violation::EmptyText { id } => write!(f, "record {id:?} has empty text"),
            Violation::HumanScoreOutOfRange { id, value } => {
                write!(f, "record {id:?} has human_score {value} outside [0,1]")
            }
        }
    }
}

/// Checks the prompt-set invariants and reports every violation found.
/// An empty report means the set is valid.
pub fn validate_prompt_set(records: &[PromptRecord]) -> Vec<Violation> {
    let mut report = Vec::new();
    let mut seen = HashSet::new();
    let mut reported_dup = HashSet::new();
    for (index, rec) in records.iter().enumerate() {
        if rec.id.trim().is_empty() {
            report.push(Violation::EmptyId { index });
        } else if !seen.insert(rec.id.as_str()) && reported_dup.insert(rec.id.as_str()) {
            report.push(Violation::DuplicateId { id: rec.id.clone() });
        }
        if rec.text.trim().is_empty() {
            report.push(Violation::EmptyText { id: rec.id.clone() });
        }
        if let Some(h) = rec.human_score {
            if !(0.0..=1.0).contains(&h) {
                report.push(Violation::HumanScoreOutOfRange {
                    id: rec.id.clone(),
                    value: h,
                });
            }
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Entity,
    Relational,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub kind: QuestionKind,
    #[serde(default)]
    pub assertion_index: Option<usize>,
    #[serde(default)]
    pub subject_entities: Vec<String>,
}

impl Question {
    pub fn new(text: impl Into<String>, kind: QuestionKind) -> Self {
        Self {
            text: text.into(),
            kind,
            assertion_index: None,
            subject_entities: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub prompt_id: String,
    pub assertions: Vec<String>,
    pub entity: Vec<Question>,
    pub relational: Vec<Question>,
    #[serde(rename = "global_", alias = "global")]
    pub global: Vec<Question>,
}

impl QuestionSet {
    /// Returns every invariant violation; empty means valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let groups = [
            ("entity", QuestionKind::Entity, &self.entity),
            ("relational", QuestionKind::Relational, &self.relational),
            ("global", QuestionKind::Global, &self.global),
        ];
        for (name, kind, list) in groups {
            for (i, q) in list.iter().enumerate() {
                if q.kind != kind {
                    out.push(format!("{name}[{i}] has kind {:?}", q.kind));
                }
                if q.text.trim().is_empty() {
                    out.push(format!("{name}[{i}] has empty text"));
                }
                if let Some(a) = q.assertion_index {
                    if a >= self.assertions.len() {
                        out.push(format!(
                            "{name}[{i}] assertion_index {a} out of range (have {} assertions)",
                            self.assertions.len()
                        ));
                    }
                }
                let n = q.subject_entities.len();
                match kind {
                    QuestionKind::Entity if n > 1 => out.push(format!(
                        "{name}[{i}] references {n} entities; entity questions reference at most 1"
                    )),
                    QuestionKind::Relational if n == 1 => out.push(format!(
                        "{name}[{i}] references 1 entity; relational questions need 2 or more"
                    )),
                    _ => {}
                }
            }
        }
        if self.global.is_empty() {
            out.push("no global questions".to_string());
        }
        out
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.entity.len(), self.relational.len(), self.global.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxKind {
    Entity,
    Relational,
    WholeImage,
}

/// Axis-aligned pixel rectangle, half-open: `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub label: String,
    pub confidence: f64,
    pub kind: BoxKind,
    /// Indices of the two parent entity boxes, for relational boxes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parents: Option<[usize; 2]>,
}

impl BBox {
    pub fn whole_image(width: u32, height: u32) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
            label: "whole_image".to_string(),
            confidence: 1.0,
            kind: BoxKind::WholeImage,
            parents: None,
        }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && (0.0..=1.0).contains(&self.confidence)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w as u64 * h as u64
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackFlags {
    pub entity: bool,
    pub relational: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub entity_boxes: Vec<BBox>,
    pub relational_boxes: Vec<BBox>,
    pub fallback_used: FallbackFlags,
}

impl BoxSet {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let all = self.entity_boxes.iter().chain(&self.relational_boxes);
        for (i, b) in all.enumerate() {
            if !b.is_valid() {
                out.push(format!("box #{i} is degenerate or has bad confidence"));
            }
            if !b.fits_in(self.image_width, self.image_height) {
                out.push(format!("box #{i} exceeds image bounds"));
            }
        }
        if !self.fallback_used.entity {
            for (i, r) in self.relational_boxes.iter().enumerate() {
                match r.parents {
                    Some([a, b]) => {
                        let (Some(pa), Some(pb)) =
                            (self.entity_boxes.get(a), self.entity_boxes.get(b))
                        else {
                            out.push(format!("relational #{i} has dangling parents"));
                            continue;
                        };
                        if !r.contains(pa) || !r.contains(pb) {
                            out.push(format!("relational #{i} does not contain its parents"));
                        }
                    }
                    None if r.kind == BoxKind::Relational => {
                        out.push(format!("relational #{i} has no parent provenance"));
                    }
                    None => {}
                }
            }
        }
        if !self.fallback_used.relational {
            let n = self.entity_boxes.len();
            if self.relational_boxes.len() != n * n.saturating_sub(1) / 2 {
                out.push(format!(
                    "{} relational boxes for {n} entity boxes",
                    self.relational_boxes.len()
                ));
            }
        }
        out
    }
}

/// Winning cell of one score-matrix row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowBest {
    pub value: f64,
    pub index: usize,
}

/// Where a matrix column came from: the box index within its group and the
/// pixel window actually shown to the VQA backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRef {
    pub box_index: usize,
    pub kind: BoxKind,
    pub label: String,
    pub window: [u32; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub questions: Vec<String>,
    pub regions: Vec<RegionRef>,
    pub values: Vec<Vec<f64>>,
    pub best: Vec<RowBest>,
}

impl ScoreMatrix {
    /// Assembles a matrix and computes per-row maxima. Ties go to the lowest
    /// column index.
    pub fn from_values(
        questions: Vec<String>,
        regions: Vec<RegionRef>,
        values: Vec<Vec<f64>>,
    ) -> Self {
        let best = values.iter().filter_map(|row| row_best(row)).collect();
        Self {
            questions,
            regions,
            values,
            best,
        }
    }
}

pub fn row_best(row: &[f64]) -> Option<RowBest> {
    let mut it = row.iter().copied().enumerate();
    let (mut index, mut value) = it.next()?;
    for (j, v) in it {
        if v > value {
            value = v;
            index = j;
        }
    }
    Some(RowBest { value, index })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedScore {
    pub question: String,
    pub score: f64,
    /// Index into the group's box list of the highest-scoring region.
    pub argmax: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalScore {
    pub question: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuestionScores {
    pub entity: Vec<MatchedScore>,
    pub relational: Vec<MatchedScore>,
    #[serde(rename = "global_", alias = "global")]
    pub global: Vec<GlobalScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_matrix: Option<ScoreMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relational_matrix: Option<ScoreMatrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneracyFlag {
    NoEntitiesDetected,
    NoRelationalBoxes,
    NoEntityQuestions,
    NoRelationalQuestions,
    /// Fine-grained score undefined; overall equals the coarse-grained score.
    CoarseOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub prompt_id: String,
    pub image_id: String,
    pub fine_grained: Option<f64>,
    pub coarse_grained: f64,
    pub overall: f64,
    pub policy: EmptyGroupRule,
    pub scores: QuestionScores,
    pub degeneracy_flags: BTreeSet<DegeneracyFlag>,
}
