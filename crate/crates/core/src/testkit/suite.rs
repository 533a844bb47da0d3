//! Seeded generation of scene suites with corrupted variants.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{parse_question, question_set_for, Predicate};
use super::oracle::query_holds;
use super::render::render_scene;
use super::scene::{
    corrupt, predicate_holds, Color, Corruption, CorruptionKind, Rect, Relation, SceneObject,
    SceneSpec, Shape, Texture,
};
use crate::error::{Error, Result};
use crate::model::{Category, PromptRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub scenes: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Corrupted variants per scene: variant k carries k corruptions.
    pub max_corruptions: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            scenes: 50,
            seed: 7,
            min_objects: 2,
            max_objects: 3,
            max_corruptions: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCase {
    pub scene_id: String,
    pub category: Category,
    /// `variants[k]` has the first k corruptions applied.
    pub variants: Vec<SceneSpec>,
    pub corruptions: Vec<Corruption>,
}

impl SuiteCase {
    pub fn clean(&self) -> &SceneSpec {
        &self.variants[0]
    }

    pub fn prompt(&self) -> PromptRecord {
        PromptRecord::new(
            self.scene_id.clone(),
            self.clean().prompt_text.clone(),
            self.category,
        )
    }
}

const CANVAS: u32 = 240;
const CELL: u32 = 80;
const MIN_SIDE: u32 = 36;
const MAX_SIDE: u32 = 64;

fn place(rng: &mut ChaCha8Rng, cell: u32) -> Rect {
    let (cx, cy) = ((cell % 3) * CELL, (cell / 3) * CELL);
    let w = rng.random_range(MIN_SIDE..=MAX_SIDE);
    let h = rng.random_range(MIN_SIDE..=MAX_SIDE);
    let x0 = cx + rng.random_range(0..=CELL - w);
    let y0 = cy + rng.random_range(0..=CELL - h);
    Rect::new(x0, y0, x0 + w, y0 + h)
}

fn category_of(spec: &SceneSpec) -> Category {
    if !spec.relations.is_empty() {
        Category::Spatial
    } else if spec.objects.iter().any(|o| o.texture == Texture::Striped) {
        Category::Texture
    } else if spec.objects.len() > 1 {
        Category::Shape
    } else {
        Category::Color
    }
}

/// A random valid scene with distinct shapes and colors, one object per
/// grid cell, and a true spatial relation between most consecutive pairs.
pub fn generate_scene(rng: &mut ChaCha8Rng, n_objects: usize) -> Result<SceneSpec> {
    if n_objects == 0 || n_objects > Shape::ALL.len() {
        return Err(Error::InvalidInput(format!(
            "scenes hold 1..={} objects",
            Shape::ALL.len()
        )));
    }
    let mut shapes = Shape::ALL.to_vec();
    shapes.shuffle(rng);
    let mut colors = Color::ALL.to_vec();
    colors.shuffle(rng);
    let mut cells: Vec<u32> = (0..9).collect();
    cells.shuffle(rng);
    let objects: Vec<SceneObject> = (0..n_objects)
        .map(|i| {
            let texture = if rng.random_bool(0.3) {
                Texture::Striped
            } else {
                Texture::Solid
            };
            SceneObject::new(shapes[i], colors[i], texture, place(rng, cells[i]))
        })
        .collect();
    let mut relations = Vec::new();
    for i in 1..n_objects {
        if rng.random_bool(0.25) {
            continue;
        }
        let holding: Vec<Predicate> = Predicate::ALL
            .into_iter()
            .filter(|&p| predicate_holds(p, &objects[i - 1].rect, &objects[i].rect))
            .collect();
        if let Some(&predicate) = holding.choose(rng) {
            relations.push(Relation {
                subject: i - 1,
                predicate,
                object: i,
            });
        }
    }
    SceneSpec::new(CANVAS, CANVAS, objects, relations)
}

fn random_corruption(
    rng: &mut ChaCha8Rng,
    n_objects: usize,
    avoid: &[usize],
) -> Option<Corruption> {
    let kinds: Vec<CorruptionKind> = CorruptionKind::ALL
        .into_iter()
        .filter(|k| k.arity() <= n_objects)
        .collect();
    let kind = *kinds.choose(rng)?;
    let mut idx: Vec<usize> = (0..n_objects).collect();
    idx.shuffle(rng);
    // Untouched objects first, so stacked corruptions compound.
    idx.sort_by_key(|i| avoid.contains(i));
    Some(Corruption {
        kind,
        targets: idx[..kind.arity()].to_vec(),
    })
}

/// Number of the prompt's oracle questions that hold of the scene as a
/// whole.
pub fn satisfied_questions(spec: &SceneSpec) -> Result<usize> {
    let qs = question_set_for("", &spec.prompt_text)?;
    let mut n = 0;
    for q in qs.entity.iter().chain(&qs.relational).chain(&qs.global) {
        if query_holds(&parse_question(&q.text)?, &spec.objects) {
            n += 1;
        }
    }
    Ok(n)
}

/// Applies a random valid corruption to `spec` that falsifies at least one
/// more question than `spec` already does, trying a bounded number of
/// candidates.
pub fn corrupt_randomly(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    avoid: &[usize],
) -> Result<(Corruption, SceneSpec)> {
    let before = satisfied_questions(spec)?;
    for _ in 0..200 {
        let Some(c) = random_corruption(rng, spec.objects.len(), avoid) else {
            break;
        };
        if let Ok(out) = corrupt(spec, &c) {
            if satisfied_questions(&out)? < before {
                return Ok((c, out));
            }
        }
    }
    Err(Error::Scene(format!(
        "no valid corruption found for {:?}",
        spec.prompt_text
    )))
}

pub fn generate_suite(config: &SuiteConfig) -> Result<Vec<SuiteCase>> {
    if config.min_objects == 0 || config.min_objects > config.max_objects {
        return Err(Error::Config("need 1 <= min_objects <= max_objects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cases = Vec::with_capacity(config.scenes);
    let mut attempts = 0;
    while cases.len() < config.scenes {
        attempts += 1;
        if attempts > config.scenes * 20 + 100 {
            return Err(Error::Scene(
                "could not generate enough corruptible scenes".into(),
            ));
        }
        let n = rng.random_range(config.min_objects..=config.max_objects);
        let clean = generate_scene(&mut rng, n)?;
        let mut variants = vec![clean];
        let mut corruptions: Vec<Corruption> = Vec::new();
        let mut ok = true;
        for _ in 0..config.max_corruptions {
            let touched: Vec<usize> = corruptions
                .iter()
                .flat_map(|c| c.targets.iter().copied())
                .collect();
            match corrupt_randomly(&mut rng, variants.last().expect("nonempty"), &touched) {
                Ok((c, spec)) => {
                    corruptions.push(c);
                    variants.push(spec);
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let category = category_of(&variants[0]);
        cases.push(SuiteCase {
            scene_id: format!("scene{:03}", cases.len()),
            category,
            variants,
            corruptions,
        });
    }
    Ok(cases)
}

/// Image file name for the variant with `k` corruptions.
pub fn variant_file_name(k: usize) -> String {
    format!("c{k}.png")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrittenSuite {
    pub prompt_set: PathBuf,
    pub image_root: PathBuf,
    pub scenes: PathBuf,
}

/// Writes `prompts.jsonl`, `scenes.jsonl` and `images/<scene_id>/c<k>.png`
/// (with sidecars) under `dir`.
pub fn write_suite(cases: &[SuiteCase], dir: &Path) -> Result<WrittenSuite> {
    let image_root = dir.join("images");
    std::fs::create_dir_all(&image_root)?;
    let prompt_set = dir.join("prompts.jsonl");
    let scenes = dir.join("scenes.jsonl");
    let mut pf = std::io::BufWriter::new(std::fs::File::create(&prompt_set)?);
    let mut sf = std::io::BufWriter::new(std::fs::File::create(&scenes)?);
    for case in cases {
        writeln!(pf, "{}", serde_json::to_string(&case.prompt())?)?;
        writeln!(sf, "{}", serde_json::to_string(case)?)?;
        for (k, spec) in case.variants.iter().enumerate() {
            render_scene(
                spec,
                &image_root.join(&case.scene_id).join(variant_file_name(k)),
            )?;
        }
    }
    pf.flush()?;
    sf.flush()?;
    Ok(WrittenSuite {
        prompt_set,
        image_root,
        scenes,
    })
}
