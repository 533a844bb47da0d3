use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use compeval_core::aggregation::{AggregationPolicy, EmptyGroupRule};
use compeval_core::cache::Cache;
use compeval_core::harness::{
    self, join_ratings, load_human_ratings, load_prompt_set, make_detector, make_generator,
    make_vqa, read_results, DetectorSpec, GeneratorSpec, Metric, RunConfig, RunOptions, RunSummary,
    SampleContext, VqaSpec, SUMMARY_FILE,
};
use compeval_core::http::HttpSettings;
use compeval_core::image_decomp::{build_box_set, DecompositionConfig, LoadedImage};
use compeval_core::model::{Category, PromptRecord, QuestionSet};
use compeval_core::question_gen::{decompose_prompt, GenerationTemplate};
use compeval_core::stats::{correlation_report, Sample};
use compeval_core::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_FAILURES: u8 = 2;
const EXIT_FATAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "compeval",
    version,
    about = "Compositional text-to-image alignment scoring"
)]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Cache directory for backend results.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// More logging on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose prompts into entity, relational and global questions.
    Decompose(DecomposeArgs),
    /// Detect entity boxes and build relational boxes for an image.
    Detect(DetectArgs),
    /// Score one image against one prompt.
    Score(ScoreArgs),
    /// Run a full evaluation from a config file.
    Evaluate(EvaluateArgs),
    /// Correlate metric scores with human ratings.
    Correlate(CorrelateArgs),
    /// Show the summary of a finished run.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Oracle,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum VqaKind {
    Oracle,
    OracleSoft,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Drop,
    Zero,
}

impl From<PolicyArg> for AggregationPolicy {
    fn from(p: PolicyArg) -> Self {
        AggregationPolicy {
            empty_group_rule: match p {
                PolicyArg::Drop => EmptyGroupRule::DropTermRenormalize,
                PolicyArg::Zero => EmptyGroupRule::ScoreZero,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Overall,
    Fine,
    Coarse,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Overall => Metric::Overall,
            MetricArg::Fine => Metric::Fine,
            MetricArg::Coarse => Metric::Coarse,
        }
    }
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false)]
struct PromptSource {
    /// A single prompt.
    #[arg(long)]
    prompt: Option<String>,
    /// A JSONL prompt set.
    #[arg(long)]
    prompt_set: Option<PathBuf>,
}

#[derive(Args)]
struct GeneratorArgs {
    #[arg(long, value_enum, default_value = "oracle")]
    backend: BackendKind,
    /// Model name for the http backend.
    #[arg(long, default_value = "gpt-4")]
    model: String,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    max_retries: usize,
}

impl GeneratorArgs {
    fn spec(&self) -> GeneratorSpec {
        match self.backend {
            BackendKind::Oracle => GeneratorSpec::Oracle,
            BackendKind::Http => GeneratorSpec::Http(HttpSettings::new(&self.model)),
        }
    }

    fn template(&self) -> compeval_core::Result<GenerationTemplate> {
        match &self.template {
            Some(p) => GenerationTemplate::load(p),
            None => Ok(GenerationTemplate::default_two_shot()),
        }
    }
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    source: PromptSource,
    #[command(flatten)]
    generator: GeneratorArgs,
    /// Write JSONL here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectorArgs {
    #[arg(long = "detector", value_enum, default_value = "oracle")]
    detector: BackendKind,
    #[arg(long, default_value = "detector")]
    detector_model: String,
    #[arg(long)]
    confidence_threshold: Option<f64>,
    #[arg(long)]
    max_boxes: Option<usize>,
    #[arg(long)]
    min_side: Option<u32>,
}

impl DetectorArgs {
    fn spec(&self) -> DetectorSpec {
        match self.detector {
            BackendKind::Oracle => DetectorSpec::Oracle,
            BackendKind::Http => DetectorSpec::Http(HttpSettings::new(&self.detector_model)),
        }
    }

    fn config(&self) -> DecompositionConfig {
        let mut c = DecompositionConfig::default();
        if let Some(t) = self.confidence_threshold {
            c.confidence_threshold = t;
        }
        if let Some(m) = self.max_boxes {
            c.max_entity_boxes = m;
        }
        if let Some(s) = self.min_side {
            c.min_region_side = s;
        }
        c
    }
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    image: PathBuf,
    /// Prompt to decompose.
    #[arg(
        long,
        conflicts_with = "questions",
        required_unless_present = "questions"
    )]
    prompt: Option<String>,
    /// A QuestionSet JSON file (as written by `decompose`).
    #[arg(long)]
    questions: Option<PathBuf>,
    #[command(flatten)]
    generator: GeneratorArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    #[arg(long, value_enum, default_value = "oracle")]
    vqa: VqaKind,
    #[arg(long, default_value = "vqa")]
    vqa_model: String,
    #[arg(long, value_enum, default_value = "drop")]
    policy: PolicyArg,
    /// Include the full score matrices.
    #[arg(long)]
    matrices: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue the latest run with the same config.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    prompt_set: Option<PathBuf>,
    #[arg(long)]
    image_root: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    max_retries: Option<usize>,
}

#[derive(Args)]
struct CorrelateArgs {
    /// results.jsonl of a run.
    #[arg(long)]
    results: PathBuf,
    /// Human ratings JSONL: {prompt_id, image_id, human_score, model?, category?}.
    #[arg(long)]
    human: PathBuf,
    /// Prompt set supplying categories for ratings that lack one.
    #[arg(long)]
    prompt_set: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "overall")]
    metric: MetricArg,
    /// Grouping keys: any of `model`, `category`, comma separated.
    #[arg(long, default_value = "model,category")]
    group_by: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing summary.json.
    #[arg(long)]
    run: PathBuf,
}

/// Error carrying the process exit code.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

fn exit_code_for(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Schema(_)
            | Error::Line { .. }
            | Error::InvalidInput(_)
            | Error::Parse(_)
            | Error::UnsupportedPrompt(_)
            | Error::Decomposition { .. }
            | Error::Scene(_),
        ) => EXIT_VALIDATION,
        _ => EXIT_FATAL,
    }
}

impl From<anyhow::Error> for Exit {
    fn from(e: anyhow::Error) -> Self {
        Exit(exit_code_for(&e), e)
    }
}

impl From<Error> for Exit {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<u8, Exit>;

fn stdout_line(s: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{s}")?;
    Ok(())
}

fn open_cache(dir: &Option<PathBuf>) -> compeval_core::Result<Option<Cache>> {
    dir.as_ref().map(Cache::open).transpose()
}

fn decompose(cli: &Cli, args: &DecomposeArgs) -> CmdResult {
    let prompts = match (&args.source.prompt, &args.source.prompt_set) {
        (Some(p), None) => vec![PromptRecord::new("prompt", p.clone(), Category::Other)],
        (None, Some(path)) => load_prompt_set(path)?,
        _ => unreachable!("clap enforces exactly one source"),
    };
    let backend = make_generator(&args.generator.spec())?;
    let template = args.generator.template()?;
    let cache = open_cache(&cli.cache_dir)?;
    let mut lines = Vec::with_capacity(prompts.len());
    for p in &prompts {
        match decompose_prompt(
            p,
            backend.as_ref(),
            &template,
            args.generator.max_retries,
            cache.as_ref(),
        ) {
            Ok(qs) => lines.push(serde_json::to_string(&qs).map_err(anyhow::Error::from)?),
            Err(e) => {
                if let Error::Decomposition { last_raw, .. } = &e {
                    eprintln!("last backend output for {:?}:\n{last_raw}", p.id);
                }
                return Err(anyhow::Error::from(e)
                    .context(format!("decomposing {:?}", p.id))
                    .into());
            }
        }
    }
    let body = lines.iter().map(|l| format!("{l}\n")).collect::<String>();
    match &args.out {
        Some(path) => std::fs::write(path, body)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(|e| Exit(EXIT_FATAL, e))?,
        None => print!("{body}"),
    }
    Ok(0)
}

fn detect(cli: &Cli, args: &DetectArgs) -> CmdResult {
    let image = LoadedImage::open(&args.image)?;
    let backend = make_detector(&args.detector.spec())?;
    let cache = open_cache(&cli.cache_dir)?;
    let boxes = build_box_set(
        &image,
        backend.as_ref(),
        &args.detector.config(),
        cache.as_ref(),
    )?;
    if cli.json {
        stdout_line(&serde_json::to_string(&boxes).map_err(anyhow::Error::from)?)?;
    } else {
        let mut out = format!(
            "{} ({}x{})\n{:<11} {:>4} {:>4} {:>4} {:>4} {:>6}  label\n",
            boxes.image_id,
            boxes.image_width,
            boxes.image_height,
            "kind",
            "x0",
            "y0",
            "x1",
            "y1",
            "conf"
        );
        for (kind, list) in [
            ("entity", &boxes.entity_boxes),
            ("relational", &boxes.relational_boxes),
        ] {
            for b in list.iter() {
                out.push_str(&format!(
                    "{kind:<11} {:>4} {:>4} {:>4} {:>4} {:>6.3}  {}\n",
                    b.x0, b.y0, b.x1, b.y1, b.confidence, b.label
                ));
            }
        }
        if boxes.fallback_used.entity || boxes.fallback_used.relational {
            out.push_str("(whole-image fallback used)\n");
        }
        print!("{out}");
    }
    Ok(0)
}

fn vqa_spec(kind: VqaKind, model: &str) -> VqaSpec {
    match kind {
        VqaKind::Oracle => VqaSpec::Oracle { soft: false },
        VqaKind::OracleSoft => VqaSpec::Oracle { soft: true },
        VqaKind::Http => VqaSpec::Http(HttpSettings::new(model)),
    }
}

fn score(cli: &Cli, args: &ScoreArgs) -> CmdResult {
    let cache = open_cache(&cli.cache_dir)?;
    let qs: QuestionSet = match (&args.prompt, &args.questions) {
        (Some(p), _) => {
            let generator = make_generator(&args.generator.spec())?;
            let record = PromptRecord::new("prompt", p.clone(), Category::Other);
            decompose_prompt(
                &record,
                generator.as_ref(),
                &args.generator.template()?,
                args.generator.max_retries,
                cache.as_ref(),
            )?
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
            let qs: QuestionSet = serde_json::from_str(first)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            let v = qs.violations();
            if !v.is_empty() {
                return Err(Error::Schema(v).into());
            }
            qs
        }
        (None, None) => unreachable!("clap requires a question source"),
    };
    let image = LoadedImage::open(&args.image)?;
    let detector = make_detector(&args.detector.spec())?;
    let vqa = make_vqa(&vqa_spec(args.vqa, &args.vqa_model))?;
    let config = args.detector.config();
    let ctx = SampleContext {
        detector: detector.as_ref(),
        vqa: vqa.as_ref(),
        cache: cache.as_ref(),
        decomposition: &config,
        policy: args.policy.into(),
        keep_matrices: args.matrices,
        cell_concurrency: 4,
    };
    let result = ctx.evaluate(&qs, &image).map_err(|e| Exit::from(e.error))?;
    if cli.json {
        stdout_line(&serde_json::to_string(&result).map_err(anyhow::Error::from)?)?;
    } else {
        let mut out = String::new();
        for (label, list) in [
            ("entity", &result.scores.entity),
            ("relational", &result.scores.relational),
        ] {
            for s in list.iter() {
                out.push_str(&format!(
                    "{label:<10} {:.4}  box {:<3} {}\n",
                    s.score, s.argmax, s.question
                ));
            }
        }
        for s in &result.scores.global {
            out.push_str(&format!(
                "{:<10} {:.4}  {:<7} {}\n",
                "global", s.score, "", s.question
            ));
        }
        out.push_str(&format!(
            "fine {}  coarse {:.4}  overall {:.4}\n",
            result
                .fine_grained
                .map_or("-".into(), |f| format!("{f:.4}")),
            result.coarse_grained,
            result.overall
        ));
        print!("{out}");
    }
    Ok(0)
}

fn print_summary(cli: &Cli, summary: &RunSummary) -> anyhow::Result<()> {
    if cli.json {
        stdout_line(&serde_json::to_string(summary)?)
    } else {
        print!("{}", summary.render_text());
        Ok(())
    }
}

fn evaluate(cli: &Cli, args: &EvaluateArgs) -> CmdResult {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(c) = args.concurrency {
        config.concurrency = c;
    }
    if let Some(p) = &args.output_dir {
        config.output_dir = p.clone();
    }
    if let Some(p) = &args.prompt_set {
        config.prompt_set = p.clone();
    }
    if let Some(p) = &args.image_root {
        config.image_root = p.clone();
    }
    if let Some(p) = args.policy {
        config.aggregation = p.into();
    }
    if let Some(r) = args.max_retries {
        config.max_retries = r;
    }
    if let Some(c) = &cli.cache_dir {
        config.cache_dir = Some(c.clone());
    }
    let run = harness::run_evaluation(
        &config,
        RunOptions {
            resume: args.resume,
            abort_after: None,
        },
    )?;
    eprintln!("run {} written to {}", run.run_id, run.run_dir.display());
    print_summary(cli, &run.summary)?;
    if run.failures.is_empty() {
        Ok(0)
    } else {
        eprintln!(
            "{} sample(s) failed; see failures.jsonl",
            run.failures.len()
        );
        Ok(EXIT_FAILURES)
    }
}

fn correlate(cli: &Cli, args: &CorrelateArgs) -> CmdResult {
    let keys: Vec<&str> = args
        .group_by
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if let Some(bad) = keys.iter().find(|k| !matches!(**k, "model" | "category")) {
        return Err(Error::InvalidInput(format!("unknown --group-by key {bad:?}")).into());
    }
    let results = read_results(&args.results)?;
    let ratings = load_human_ratings(&args.human)?;
    let categories: HashMap<String, Category> = match &args.prompt_set {
        Some(p) => load_prompt_set(p)?
            .into_iter()
            .map(|r| (r.id, r.category))
            .collect(),
        None => HashMap::new(),
    };
    let joined = join_ratings(&results, &ratings, &categories, args.metric.into());
    if joined.unjoined > 0 {
        eprintln!(
            "warning: {} rating(s) could not be joined to a result",
            joined.unjoined
        );
    }
    let samples: Vec<Sample> = joined
        .samples
        .into_iter()
        .map(|mut s| {
            if !keys.contains(&"model") {
                s.model = "all".into();
            }
            if !keys.contains(&"category") {
                s.category = "all".into();
            }
            s
        })
        .collect();
    let table = correlation_report(&samples)?;
    if table.groups.is_empty() {
        return Err(Error::InvalidInput("no group has at least 2 joined rows".into()).into());
    }
    if cli.json {
        stdout_line(&serde_json::to_string(&table).map_err(anyhow::Error::from)?)?;
    } else {
        print!("{}", table.render_text());
    }
    Ok(0)
}

fn report(cli: &Cli, args: &ReportArgs) -> CmdResult {
    let path = args.run.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| Exit(EXIT_VALIDATION, e))?;
    let summary: RunSummary = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    print_summary(cli, &summary)?;
    Ok(if summary.failures > 0 {
        EXIT_FAILURES
    } else {
        0
    })
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Decompose(a) => decompose(cli, a),
        Command::Detect(a) => detect(cli, a),
        Command::Score(a) => score(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Correlate(a) => correlate(cli, a),
        Command::Report(a) => report(cli, a),
    }
}

fn check_exists(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_VALIDATION,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    if let Command::Evaluate(a) = &cli.command {
        if let Err(e) = check_exists(&a.config) {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
