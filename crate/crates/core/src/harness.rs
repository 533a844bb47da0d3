//! End-to-end runs: prompt ingestion, image discovery, the scoring
//! pipeline under a worker pool, incremental persistence and resume.
//!
//! A run writes `<output_dir>/<run_id>/` containing `config.json`,
//! `results.jsonl`, `failures.jsonl` and `summary.json`. The run id is a
//! UTC timestamp followed by the first 12 hex digits of the config hash.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::aggregation::{aggregate_scores, AggregationPolicy};
use crate::cache::{Cache, CacheStats};
use crate::error::{Error, Result};
use crate::http::{HttpDetector, HttpGenerator, HttpSettings, HttpVqa};
use crate::image_decomp::{
    build_box_set, crop_all, DecompositionConfig, Detection, DetectorBackend, LoadedImage, Region,
};
use crate::model::{
    validate_prompt_set, Category, DegeneracyFlag, EvalResult, PromptRecord, QuestionScores,
    QuestionSet,
};
use crate::question_gen::{decompose_prompt, GenerationTemplate, GeneratorBackend};
use crate::scoring::{Scorer, VqaBackend};
use crate::stats::Sample;
use crate::testkit::{OracleDetector, OracleGenerator, OracleVqa};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    #[default]
    Oracle,
    Http(HttpSettings),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorSpec {
    #[default]
    Oracle,
    Http(HttpSettings),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VqaSpec {
    Oracle {
        #[serde(default)]
        soft: bool,
    },
    Http(HttpSettings),
}

impl Default for VqaSpec {
    fn default() -> Self {
        VqaSpec::Oracle { soft: false }
    }
}

fn default_concurrency() -> usize {
    4
}

fn default_retries() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub prompt_set: PathBuf,
    pub image_root: PathBuf,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub detector: DetectorSpec,
    #[serde(default)]
    pub vqa: VqaSpec,
    /// Generation template file; the built-in two-shot template otherwise.
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default)]
    pub decomposition: DecompositionConfig,
    #[serde(default)]
    pub aggregation: AggregationPolicy,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Store the full score matrices in every result.
    #[serde(default)]
    pub keep_matrices: bool,
}

impl RunConfig {
    pub fn new(
        prompt_set: impl Into<PathBuf>,
        image_root: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            prompt_set: prompt_set.into(),
            image_root: image_root.into(),
            output_dir: output_dir.into(),
            cache_dir: None,
            generator: GeneratorSpec::default(),
            detector: DetectorSpec::default(),
            vqa: VqaSpec::default(),
            template: None,
            max_retries: default_retries(),
            decomposition: DecompositionConfig::default(),
            aggregation: AggregationPolicy::default(),
            concurrency: default_concurrency(),
            keep_matrices: false,
        }
    }

    /// Reads a JSON config. Relative paths are taken relative to the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.prompt_set);
        fix(&mut cfg.image_root);
        fix(&mut cfg.output_dir);
        if let Some(p) = cfg.cache_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.template.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.prompt_set.is_file() {
            return Err(Error::Config(format!(
                "prompt set {} does not exist",
                self.prompt_set.display()
            )));
        }
        if !self.image_root.is_dir() {
            return Err(Error::Config(format!(
                "image root {} does not exist",
                self.image_root.display()
            )));
        }
        if let Some(t) = &self.template {
            if !t.is_file() {
                return Err(Error::Config(format!(
                    "template {} does not exist",
                    t.display()
                )));
            }
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        self.decomposition.validate()
    }

    pub fn cache_root(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    /// Hex SHA-256 of the canonical config JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn template(&self) -> Result<GenerationTemplate> {
        match &self.template {
            Some(p) => GenerationTemplate::load(p),
            None => Ok(GenerationTemplate::default_two_shot()),
        }
    }
}

pub fn make_generator(spec: &GeneratorSpec) -> Result<Box<dyn GeneratorBackend>> {
    Ok(match spec {
        GeneratorSpec::Oracle => Box::new(OracleGenerator),
        GeneratorSpec::Http(s) => Box::new(HttpGenerator::new(s.clone())?),
    })
}

pub fn make_detector(spec: &DetectorSpec) -> Result<Box<dyn DetectorBackend>> {
    Ok(match spec {
        DetectorSpec::Oracle => Box::new(OracleDetector),
        DetectorSpec::Http(s) => Box::new(HttpDetector::new(s.clone())?),
    })
}

pub fn make_vqa(spec: &VqaSpec) -> Result<Box<dyn VqaBackend>> {
    Ok(match spec {
        VqaSpec::Oracle { soft: false } => Box::new(OracleVqa::hard()),
        VqaSpec::Oracle { soft: true } => Box::new(OracleVqa::soft()),
        VqaSpec::Http(s) => Box::new(HttpVqa::new(s.clone())?),
    })
}

/// Backend wrapper that counts calls reaching the wrapped backend.
pub struct Counting<B: ?Sized> {
    pub calls: AtomicUsize,
    inner: Box<B>,
}

impl<B: ?Sized> Counting<B> {
    pub fn new(inner: Box<B>) -> Self {
        Self {
            calls: AtomicUsize::new(0),
            inner,
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl GeneratorBackend for Counting<dyn GeneratorBackend> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }
    fn model_version(&self) -> &str {
        self.inner.model_version()
    }
    fn complete(&self, request: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

impl DetectorBackend for Counting<dyn DetectorBackend> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }
    fn model_version(&self) -> &str {
        self.inner.model_version()
    }
    fn detect(&self, image: &LoadedImage) -> Result<Vec<Detection>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.detect(image)
    }
}

impl VqaBackend for Counting<dyn VqaBackend> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }
    fn model_version(&self) -> &str {
        self.inner.model_version()
    }
    fn yes_probability(&self, region: &Region, question: &str) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.yes_probability(region, question)
    }
}

/// Reads a JSONL prompt set. Unknown categories become `other` with a
/// warning; blank lines are skipped.
pub fn load_prompt_set(path: &Path) -> Result<Vec<PromptRecord>> {
    let file = File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let v: Value = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let field = |name: &str| -> Result<String> {
            v.get(name)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| at(format!("missing string field {name:?}")))
        };
        let id = field("id")?;
        let text = field("text")?;
        let category = match v.get("category") {
            None | Some(Value::Null) => Category::Other,
            Some(Value::String(c)) => Category::from_name(c).unwrap_or_else(|| {
                log::warn!(
                    "{}:{}: unknown category {c:?}, using \"other\"",
                    path.display(),
                    i + 1
                );
                Category::Other
            }),
            Some(_) => return Err(at("category must be a string".into())),
        };
        let human_score = match v.get("human_score") {
            None | Some(Value::Null) => None,
            Some(h) => Some(
                h.as_f64()
                    .ok_or_else(|| at("human_score must be a number".into()))?,
            ),
        };
        out.push(PromptRecord {
            id,
            text,
            category,
            human_score,
        });
    }
    let violations = validate_prompt_set(&out);
    if !violations.is_empty() {
        return Err(Error::Schema(
            violations
                .iter()
                .map(|v| format!("{}: {v}", path.display()))
                .collect(),
        ));
    }
    Ok(out)
}

/// `<image_root>/<prompt id>/*.{png,jpg,jpeg}`, extensions matched
/// case-insensitively, sorted by path. A missing directory yields nothing.
pub fn resolve_images(prompt: &PromptRecord, image_root: &Path) -> Result<Vec<PathBuf>> {
    let dir = image_root.join(&prompt.id);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub prompt_id: String,
    /// Absent when the prompt had no images at all.
    pub image_id: Option<String>,
    pub stage: String,
    pub error: String,
    pub retryable: bool,
}

impl FailureRecord {
    fn new(prompt_id: &str, image_id: Option<&str>, stage: &str, err: &Error) -> Self {
        let mut error = err.to_string();
        if let Error::Decomposition { last_raw, .. } = err {
            error.push_str(&format!("; last output: {last_raw:?}"));
        }
        Self {
            prompt_id: prompt_id.to_string(),
            image_id: image_id.map(str::to_string),
            stage: stage.to_string(),
            error,
            retryable: err.is_retryable(),
        }
    }

    fn key(&self) -> (String, String) {
        (
            self.prompt_id.clone(),
            self.image_id.clone().unwrap_or_default(),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub n: usize,
    pub mean_overall: f64,
    pub mean_fine_grained: Option<f64>,
    pub mean_coarse_grained: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCalls {
    pub generator: usize,
    pub detector: usize,
    pub vqa: usize,
}

impl BackendCalls {
    pub fn total(&self) -> usize {
        self.generator + self.detector + self.vqa
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub samples: usize,
    pub results: usize,
    pub failures: usize,
    /// Samples taken over from an earlier, interrupted attempt.
    pub resumed: usize,
    pub mean_overall: Option<f64>,
    pub per_category: BTreeMap<String, CategorySummary>,
    pub wall_time_secs: f64,
    pub backend_calls: BackendCalls,
    pub cache: CacheStats,
}

impl RunSummary {
    /// Per-category mean table.
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{:<14} {:>5} {:>9} {:>9} {:>9}\n",
            "category", "n", "overall", "fine", "coarse"
        );
        for (cat, s) in &self.per_category {
            out.push_str(&format!(
                "{:<14} {:>5} {:>9.4} {:>9} {:>9.4}\n",
                cat,
                s.n,
                s.mean_overall,
                s.mean_fine_grained
                    .map_or("-".to_string(), |f| format!("{f:.4}")),
                s.mean_coarse_grained
            ));
        }
        out.push_str(&format!(
            "{} results, {} failures, {:.2}s\n",
            self.results, self.failures, self.wall_time_secs
        ));
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub results: Vec<EvalResult>,
    pub failures: Vec<FailureRecord>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue the latest run with the same config hash.
    pub resume: bool,
    /// Stop after this many newly written samples, as if killed.
    pub abort_after: Option<usize>,
}

pub const RESULTS_FILE: &str = "results.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

fn latest_run_dir(output_dir: &Path, short_hash: &str) -> Result<Option<PathBuf>> {
    if !output_dir.is_dir() {
        return Ok(None);
    }
    let suffix = format!("-{short_hash}");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(output_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().ends_with(&suffix))
        })
        .collect();
    dirs.sort();
    Ok(dirs.pop())
}

fn new_run_dir(output_dir: &Path, short_hash: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let mut dir = output_dir.join(format!("{stamp}-{short_hash}"));
    let mut n = 1;
    while dir.exists() {
        dir = output_dir.join(format!("{stamp}.{n}-{short_hash}"));
        n += 1;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Reads a JSONL file, ignoring a truncated final line.
fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) if i + 1 == lines.len() => {
                log::warn!("{}: dropping partial last line: {e}", path.display())
            }
            Err(e) => {
                return Err(Error::Line {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = std::io::BufWriter::new(File::create(&tmp)?);
        for it in items {
            serde_json::to_writer(&mut f, it)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<EvalResult>> {
    read_jsonl(path)
}

pub fn read_failures(path: &Path) -> Result<Vec<FailureRecord>> {
    read_jsonl(path)
}

/// Everything needed to score one image against a decomposed prompt.
pub struct SampleContext<'a> {
    pub detector: &'a dyn DetectorBackend,
    pub vqa: &'a dyn VqaBackend,
    pub cache: Option<&'a Cache>,
    pub decomposition: &'a DecompositionConfig,
    pub policy: AggregationPolicy,
    /// Store the full score matrices in the result.
    pub keep_matrices: bool,
    /// Cells evaluated at once within the sample.
    pub cell_concurrency: usize,
}

/// Pipeline stage that produced an error.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl SampleContext<'_> {
    /// Boxes, crops, all three question groups, aggregation.
    pub fn evaluate(
        &self,
        qs: &QuestionSet,
        image: &LoadedImage,
    ) -> std::result::Result<EvalResult, StageError> {
        let at = |stage: &'static str| move |error: Error| StageError { stage, error };
        let boxes = build_box_set(image, self.detector, self.decomposition, self.cache)
            .map_err(at("detect"))?;
        let mut flags = BTreeSet::new();
        if boxes.fallback_used.entity {
            flags.insert(DegeneracyFlag::NoEntitiesDetected);
        }
        if boxes.fallback_used.relational {
            flags.insert(DegeneracyFlag::NoRelationalBoxes);
        }
        let min_side = self.decomposition.min_region_side;
        let entity_regions = crop_all(image, &boxes.entity_boxes, min_side).map_err(at("crop"))?;
        let relational_regions =
            crop_all(image, &boxes.relational_boxes, min_side).map_err(at("crop"))?;
        let mut scorer = Scorer::new(self.vqa).with_concurrency(self.cell_concurrency);
        if let Some(c) = self.cache {
            scorer = scorer.with_cache(c);
        }
        let (entity, entity_matrix) = scorer
            .score_entity_questions(&qs.entity, &entity_regions)
            .map_err(at("score"))?;
        let (relational, relational_matrix) = scorer
            .score_relational_questions(&qs.relational, &relational_regions)
            .map_err(at("score"))?;
        let global = scorer
            .score_global_questions(&qs.global, &Region::whole(image))
            .map_err(at("score"))?;
        let keep = self.keep_matrices;
        let scores = QuestionScores {
            entity,
            relational,
            global,
            entity_matrix: entity_matrix.filter(|_| keep),
            relational_matrix: relational_matrix.filter(|_| keep),
        };
        let agg = aggregate_scores(&scores, self.policy, &mut flags).map_err(at("aggregate"))?;
        Ok(EvalResult {
            prompt_id: qs.prompt_id.clone(),
            image_id: image.id.clone(),
            fine_grained: agg.fine_grained,
            coarse_grained: agg.coarse_grained,
            overall: agg.overall,
            policy: self.policy.empty_group_rule,
            scores,
            degeneracy_flags: flags,
        })
    }

    fn evaluate_path(
        &self,
        qs: &QuestionSet,
        path: &Path,
    ) -> std::result::Result<EvalResult, StageError> {
        let image = LoadedImage::open(path).map_err(|error| StageError {
            stage: "load",
            error,
        })?;
        self.evaluate(qs, &image)
    }
}

enum Outcome {
    Ok(Box<EvalResult>),
    Failed(FailureRecord),
}

fn image_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Runs `f` over `items` on `workers` threads, streaming outputs to
/// `sink` on the calling thread. Returns early once `sink` returns false.
fn pool<T: Sync, O: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> O + Sync,
    mut sink: impl FnMut(O) -> Result<bool>,
) -> Result<()> {
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            let tx = tx.clone();
            let (next, stop, f) = (&next, &stop, &f);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                if tx.send(f(item)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for out in rx {
            match sink(out) {
                Ok(true) => {}
                Ok(false) => {
                    stop.store(true, Ordering::SeqCst);
                    return Ok(());
                }
                Err(e) => {
                    stop.store(true, Ordering::SeqCst);
                    return Err(e);
                }
            }
        }
        Ok(())
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize_run(
    run_id: &str,
    config_hash: &str,
    prompts: &[PromptRecord],
    results: &[EvalResult],
    failures: &[FailureRecord],
) -> RunSummary {
    let categories: HashMap<&str, Category> = prompts
        .iter()
        .map(|p| (p.id.as_str(), p.category))
        .collect();
    let mut by_cat: BTreeMap<String, Vec<&EvalResult>> = BTreeMap::new();
    for r in results {
        let c = categories
            .get(r.prompt_id.as_str())
            .copied()
            .unwrap_or(Category::Other);
        by_cat.entry(c.to_string()).or_default().push(r);
    }
    let per_category = by_cat
        .into_iter()
        .map(|(c, rs)| {
            let s = CategorySummary {
                n: rs.len(),
                mean_overall: mean(rs.iter().map(|r| r.overall)).unwrap_or(0.0),
                mean_fine_grained: mean(rs.iter().filter_map(|r| r.fine_grained)),
                mean_coarse_grained: mean(rs.iter().map(|r| r.coarse_grained)).unwrap_or(0.0),
            };
            (c, s)
        })
        .collect();
    RunSummary {
        run_id: run_id.to_string(),
        config_hash: config_hash.to_string(),
        samples: results.len() + failures.len(),
        results: results.len(),
        failures: failures.len(),
        resumed: 0,
        mean_overall: mean(results.iter().map(|r| r.overall)),
        per_category,
        wall_time_secs: 0.0,
        backend_calls: BackendCalls::default(),
        cache: CacheStats::default(),
    }
}

/// Executes a run. Config problems abort before any work; per-sample
/// problems are recorded in `failures.jsonl` and never abort the run.
pub fn run_evaluation(config: &RunConfig, options: RunOptions) -> Result<RunResult> {
    let started = Instant::now();
    config.validate()?;
    let prompts = load_prompt_set(&config.prompt_set)?;
    let template = config.template()?;
    let generator = Counting::<dyn GeneratorBackend>::new(make_generator(&config.generator)?);
    let detector = Counting::<dyn DetectorBackend>::new(make_detector(&config.detector)?);
    let vqa = Counting::<dyn VqaBackend>::new(make_vqa(&config.vqa)?);
    let cache = Cache::open(config.cache_root())?;

    let config_hash = config.hash();
    let short_hash = &config_hash[..12];
    std::fs::create_dir_all(&config.output_dir)?;
    let run_dir = match options.resume {
        true => match latest_run_dir(&config.output_dir, short_hash)? {
            Some(d) => d,
            None => new_run_dir(&config.output_dir, short_hash)?,
        },
        false => new_run_dir(&config.output_dir, short_hash)?,
    };
    let run_id = run_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    std::fs::write(
        run_dir.join(CONFIG_FILE),
        serde_json::to_vec_pretty(config)?,
    )?;

    let results_path = run_dir.join(RESULTS_FILE);
    let failures_path = run_dir.join(FAILURES_FILE);
    let mut results: Vec<EvalResult> = if options.resume {
        read_results(&results_path)?
    } else {
        Vec::new()
    };
    // Earlier failures are retried.
    write_jsonl(&results_path, &results)?;
    write_jsonl::<FailureRecord>(&failures_path, &[])?;
    let resumed = results.len();
    let done: HashSet<(String, String)> = results
        .iter()
        .map(|r| (r.prompt_id.clone(), r.image_id.clone()))
        .collect();

    let mut failures: Vec<FailureRecord> = Vec::new();
    let mut pending: Vec<(usize, PathBuf)> = Vec::new();
    for (pi, p) in prompts.iter().enumerate() {
        let images = resolve_images(p, &config.image_root)?;
        if images.is_empty() {
            failures.push(FailureRecord {
                prompt_id: p.id.clone(),
                image_id: None,
                stage: "images".into(),
                error: "missing images".into(),
                retryable: false,
            });
            continue;
        }
        for img in images {
            if !done.contains(&(p.id.clone(), image_id_of(&img))) {
                pending.push((pi, img));
            }
        }
    }

    // Decompose each prompt that still has work, once.
    let need: Vec<usize> = {
        let mut v: Vec<usize> = pending.iter().map(|(pi, _)| *pi).collect();
        v.dedup();
        v
    };
    let mut question_sets: HashMap<usize, std::result::Result<QuestionSet, FailureRecord>> =
        HashMap::new();
    pool(
        &need,
        config.concurrency,
        |&pi| {
            let p = &prompts[pi];
            let qs = decompose_prompt(p, &generator, &template, config.max_retries, Some(&cache));
            (
                pi,
                qs.map_err(|e| FailureRecord::new(&p.id, None, "decompose", &e)),
            )
        },
        |(pi, r)| {
            question_sets.insert(pi, r);
            Ok(true)
        },
    )?;

    let pipeline = SampleContext {
        detector: &detector,
        vqa: &vqa,
        cache: Some(&cache),
        decomposition: &config.decomposition,
        policy: config.aggregation,
        keep_matrices: config.keep_matrices,
        cell_concurrency: 1,
    };
    let mut results_file = OpenOptions::new().append(true).open(&results_path)?;
    let mut failures_file = OpenOptions::new().append(true).open(&failures_path)?;
    for f in &failures {
        writeln!(failures_file, "{}", serde_json::to_string(f)?)?;
    }
    let mut written = 0usize;
    let mut interrupted = false;
    pool(
        &pending,
        config.concurrency,
        |(pi, path)| {
            let image_id = image_id_of(path);
            match &question_sets[pi] {
                Err(f) => Outcome::Failed(FailureRecord {
                    image_id: Some(image_id),
                    ..f.clone()
                }),
                Ok(qs) => match pipeline.evaluate_path(qs, path) {
                    Ok(r) => Outcome::Ok(Box::new(r)),
                    Err(e) => Outcome::Failed(FailureRecord::new(
                        &prompts[*pi].id,
                        Some(&image_id),
                        e.stage,
                        &e.error,
                    )),
                },
            }
        },
        |outcome| {
            match outcome {
                Outcome::Ok(r) => {
                    writeln!(results_file, "{}", serde_json::to_string(&r)?)?;
                    results_file.flush()?;
                    results.push(*r);
                }
                Outcome::Failed(f) => {
                    log::warn!(
                        "{}/{}: {} failed: {}",
                        f.prompt_id,
                        f.image_id.as_deref().unwrap_or("-"),
                        f.stage,
                        f.error
                    );
                    writeln!(failures_file, "{}", serde_json::to_string(&f)?)?;
                    failures_file.flush()?;
                    failures.push(f);
                }
            }
            written += 1;
            if options.abort_after.is_some_and(|k| written >= k) {
                interrupted = true;
                return Ok(false);
            }
            Ok(true)
        },
    )?;
    if interrupted {
        return Err(Error::Interrupted(written));
    }

    results.sort_by(|a, b| (&a.prompt_id, &a.image_id).cmp(&(&b.prompt_id, &b.image_id)));
    failures.sort_by_key(FailureRecord::key);
    write_jsonl(&results_path, &results)?;
    write_jsonl(&failures_path, &failures)?;

    let mut summary = summarize_run(&run_id, &config_hash, &prompts, &results, &failures);
    summary.resumed = resumed;
    summary.wall_time_secs = started.elapsed().as_secs_f64();
    summary.backend_calls = BackendCalls {
        generator: generator.count(),
        detector: detector.count(),
        vqa: vqa.count(),
    };
    summary.cache = cache.stats();
    std::fs::write(
        run_dir.join(SUMMARY_FILE),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(RunResult {
        run_id,
        run_dir,
        results,
        failures,
        summary,
    })
}

/// One human judgement of a generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanRating {
    pub prompt_id: String,
    pub image_id: String,
    pub human_score: f64,
    /// Defaults to the image id, which names the generating model in the
    /// one-directory-per-prompt layout.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub category: Option<String>,
}

pub fn load_human_ratings(path: &Path) -> Result<Vec<HumanRating>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Overall,
    Fine,
    Coarse,
}

impl Metric {
    pub fn of(self, r: &EvalResult) -> Option<f64> {
        match self {
            Metric::Overall => Some(r.overall),
            Metric::Fine => r.fine_grained,
            Metric::Coarse => Some(r.coarse_grained),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Joined {
    pub samples: Vec<Sample>,
    /// Ratings with no matching result, or results lacking the metric.
    pub unjoined: usize,
}

/// Pairs results with ratings on (prompt_id, image_id). The category comes
/// from the rating, then from `categories`, then defaults to `all`.
pub fn join_ratings(
    results: &[EvalResult],
    ratings: &[HumanRating],
    categories: &HashMap<String, Category>,
    metric: Metric,
) -> Joined {
    let by_key: HashMap<(&str, &str), &EvalResult> = results
        .iter()
        .map(|r| ((r.prompt_id.as_str(), r.image_id.as_str()), r))
        .collect();
    let mut out = Joined::default();
    for h in ratings {
        let Some(value) = by_key
            .get(&(h.prompt_id.as_str(), h.image_id.as_str()))
            .and_then(|r| metric.of(r))
        else {
            out.unjoined += 1;
            continue;
        };
        let category = h
            .category
            .clone()
            .or_else(|| categories.get(&h.prompt_id).map(|c| c.to_string()))
            .unwrap_or_else(|| "all".into());
        out.samples.push(Sample {
            metric: value,
            human: h.human_score,
            model: h.model.clone().unwrap_or_else(|| h.image_id.clone()),
            category,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{generate_suite, write_suite, SuiteConfig};

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn prompt_set_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        write(
            &p,
            "{\"id\":\"a\",\"text\":\"a red apple\",\"category\":\"color\"}\n\n\
             {\"id\":\"b\",\"text\":\"x\",\"category\":\"weather\"}\n\
             {\"id\":\"c\",\"text\":\"y\",\"category\":\"spatial\",\"human_score\":0.5}\n",
        );
        let r = load_prompt_set(&p).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[1].category, Category::Other);
        assert_eq!(r[2].human_score, Some(0.5));

        write(&p, "{\"id\":\"a\",\"text\":\"t\"}\n{\"id\":\"b\"}\n");
        match load_prompt_set(&p).unwrap_err() {
            Error::Line { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("text"));
            }
            e => panic!("{e}"),
        }

        write(
            &p,
            "{\"id\":\"a\",\"text\":\"t\"}\n{\"id\":\"a\",\"text\":\"u\"}\n",
        );
        assert!(matches!(load_prompt_set(&p), Err(Error::Schema(_))));
    }

    #[test]
    fn image_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let p = PromptRecord::new("p1", "t", Category::Color);
        assert!(resolve_images(&p, dir.path()).unwrap().is_empty());
        let d = dir.path().join("p1");
        std::fs::create_dir_all(&d).unwrap();
        assert!(resolve_images(&p, dir.path()).unwrap().is_empty());
        for f in ["b.png", "a.PNG", "c.Jpeg", "notes.txt"] {
            write(&d.join(f), "");
        }
        let names: Vec<String> = resolve_images(&p, dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.PNG", "b.png", "c.Jpeg"]);
    }

    fn suite_config(dir: &Path, scenes: usize) -> RunConfig {
        let cases = generate_suite(&SuiteConfig {
            scenes,
            max_corruptions: 0,
            ..SuiteConfig::default()
        })
        .unwrap();
        let w = write_suite(&cases, &dir.join("suite")).unwrap();
        let mut cfg = RunConfig::new(w.prompt_set, w.image_root, dir.join("runs"));
        cfg.concurrency = 2;
        cfg
    }

    #[test]
    fn synthetic_run_scores_perfect_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = suite_config(dir.path(), 4);
        let run = run_evaluation(&cfg, RunOptions::default()).unwrap();
        assert_eq!(run.results.len(), 4);
        assert!(run.failures.is_empty());
        assert!(
            run.results.iter().all(|r| r.overall == 1.0),
            "{:?}",
            run.results
        );
        assert!(run.run_dir.join(SUMMARY_FILE).exists());
        assert_eq!(
            read_results(&run.run_dir.join(RESULTS_FILE)).unwrap(),
            run.results
        );

        let again = run_evaluation(&cfg, RunOptions::default()).unwrap();
        assert_eq!(again.summary.backend_calls.total(), 0);
        assert_ne!(again.run_dir, run.run_dir);
        assert_eq!(
            std::fs::read(again.run_dir.join(RESULTS_FILE)).unwrap(),
            std::fs::read(run.run_dir.join(RESULTS_FILE)).unwrap()
        );
    }

    #[test]
    fn broken_image_is_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = suite_config(dir.path(), 4);
        let victim = cfg.image_root.join("scene002").join("c0.png");
        write(&victim, "not an image");
        let run = run_evaluation(&cfg, RunOptions::default()).unwrap();
        assert_eq!(run.results.len(), 3);
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].stage, "load");
        let lines = std::fs::read_to_string(run.run_dir.join(FAILURES_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 1);
    }

    #[test]
    fn missing_images_are_failures() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = suite_config(dir.path(), 2);
        std::fs::remove_dir_all(cfg.image_root.join("scene001")).unwrap();
        let run = run_evaluation(&cfg, RunOptions::default()).unwrap();
        assert_eq!((run.results.len(), run.failures.len()), (1, 1));
        assert_eq!(run.failures[0].error, "missing images");
    }

    #[test]
    fn interrupted_run_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = suite_config(dir.path(), 5);
        cfg.concurrency = 1;
        let err = run_evaluation(
            &cfg,
            RunOptions {
                resume: false,
                abort_after: Some(2),
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Interrupted(2)));
        let resumed = run_evaluation(
            &cfg,
            RunOptions {
                resume: true,
                abort_after: None,
            },
        )
        .unwrap();
        assert_eq!(resumed.summary.resumed, 2);
        assert_eq!(resumed.results.len(), 5);
    }

    #[test]
    fn bad_config_fails_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = suite_config(dir.path(), 1);
        cfg.image_root = dir.path().join("nope");
        assert!(matches!(
            run_evaluation(&cfg, RunOptions::default()),
            Err(Error::Config(_))
        ));
        assert!(!cfg.output_dir.exists());
    }

    #[test]
    fn config_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        write(
            &p,
            r#"{"prompt_set": "p.jsonl", "image_root": "img", "output_dir": "out",
                "vqa": {"kind": "oracle", "soft": true},
                "detector": {"kind": "http", "model": "det", "base_url": "http://localhost:1"}}"#,
        );
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.prompt_set, dir.path().join("p.jsonl"));
        assert_eq!(cfg.vqa, VqaSpec::Oracle { soft: true });
        assert!(matches!(cfg.detector, DetectorSpec::Http(ref s) if s.model == "det"));
        assert_eq!(cfg.cache_root(), dir.path().join("out").join("cache"));
    }

    #[test]
    fn ratings_join() {
        let r = EvalResult {
            prompt_id: "p".into(),
            image_id: "sd".into(),
            fine_grained: None,
            coarse_grained: 0.5,
            overall: 0.5,
            policy: Default::default(),
            scores: Default::default(),
            degeneracy_flags: Default::default(),
        };
        let ratings = vec![
            HumanRating {
                prompt_id: "p".into(),
                image_id: "sd".into(),
                human_score: 0.9,
                model: None,
                category: None,
            },
            HumanRating {
                prompt_id: "q".into(),
                image_id: "sd".into(),
                human_score: 0.1,
                model: None,
                category: None,
            },
        ];
        let cats = HashMap::from([("p".to_string(), Category::Shape)]);
        let j = join_ratings(std::slice::from_ref(&r), &ratings, &cats, Metric::Overall);
        assert_eq!(j.unjoined, 1);
        assert_eq!(j.samples[0].model, "sd");
        assert_eq!(j.samples[0].category, "shape");
        assert_eq!(
            join_ratings(&[r], &ratings, &cats, Metric::Fine)
                .samples
                .len(),
            0
        );
    }
}
