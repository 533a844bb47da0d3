//! Synthetic scenes and oracle backends for running the full pipeline
//! without models.

pub mod grammar;
pub mod oracle;
pub mod render;
pub mod scene;
pub mod suite;

pub use grammar::{parse_prompt, parse_question, question_set_for, Predicate, Query};
pub use oracle::{oracle_question_gen, OracleDetector, OracleGenerator, OracleVqa};
pub use render::{read_annotations, render_image, render_scene, sidecar_path, Annotation};
pub use scene::{
    corrupt, Color, Corruption, CorruptionKind, Rect, Relation, SceneObject, SceneSpec, Shape,
    Texture,
};
pub use suite::{generate_suite, write_suite, SuiteCase, SuiteConfig};
