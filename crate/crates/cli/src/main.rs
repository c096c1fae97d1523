//! `mctrace`: train, evaluate, and run the instruction-trace malware classifier.
//!
//! Exit codes: 0 success, 1 malware found (`classify --gate`), 2 error.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mctrace_core::eval::{kfold_cv, roc_curve, DEFAULT_FDR_LEVELS};
use mctrace_core::monitor::{DecisionRule, OnlineMonitor};
use mctrace_core::pipeline::{
    algorithm1_fit, load_dataset, load_model_file, read_manifest, save_model, TrainConfig, TrainedModel,
};
use mctrace_core::synth::{generate_synthetic, write_corpus, SyntheticSpec};
use mctrace_core::trace::{count_transitions, parse_trace_file, CategoryMap};
use mctrace_core::{Categorization, CvCriterion};

#[derive(Parser)]
#[command(
    name = "mctrace",
    version,
    about = "Markov-chain instruction-trace malware classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model from a labeled manifest.
    Train(TrainArgs),
    /// Score trace files with a trained model.
    Classify(ClassifyArgs),
    /// Stream a trace and emit posterior summaries as JSON lines.
    Monitor(MonitorArgs),
    /// K-fold cross-validation of the whole training procedure.
    Cv(CvArgs),
    /// ROC curve and AUC from a `<score> <label>` file.
    Roc(RocArgs),
    /// Write a synthetic two-class corpus and manifest.
    Synth(SynthArgs),
    /// Summarize a model file.
    InspectModel(InspectArgs),
}

/// TOML configuration. Every section is optional; flags override it.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    train: Option<TrainConfig>,
    monitor: Option<DecisionRule>,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

#[derive(Args)]
struct MapArgs {
    /// Category map file; defaults to the built-in 8-class map.
    #[arg(long)]
    category_map: Option<PathBuf>,
}

impl MapArgs {
    fn load(&self) -> Result<CategoryMap> {
        match &self.category_map {
            Some(p) => CategoryMap::from_path(p).with_context(|| format!("loading category map {}", p.display())),
            None => Ok(CategoryMap::cat1()),
        }
    }
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    knots: Option<usize>,
    #[arg(long)]
    nu: Option<f64>,
    /// Folds for tuning inside each training run.
    #[arg(long)]
    inner_folds: Option<usize>,
    /// Benign false-positive target used to set the decision threshold.
    #[arg(long)]
    target_fdr: Option<f64>,
    /// Deployment malware prevalence for intercept correction.
    #[arg(long)]
    prior: Option<f64>,
    #[arg(long)]
    min_trace_length: Option<u64>,
    /// Tuning criterion: deviance, misclassification, or fdr:<level>.
    #[arg(long)]
    criterion: Option<String>,
    #[command(flatten)]
    map: MapArgs,
}

fn parse_criterion(s: &str) -> Result<CvCriterion> {
    Ok(match s {
        "deviance" => CvCriterion::Deviance,
        "misclassification" => CvCriterion::Misclassification,
        other => match other.strip_prefix("fdr:") {
            Some(level) => CvCriterion::DetectionAtFdr(level.parse().context("fdr level")?),
            None => bail!("unknown criterion '{other}'"),
        },
    })
}

impl TrainFlags {
    fn resolve(&self, map: &CategoryMap) -> Result<TrainConfig> {
        let mut cfg = read_config(self.config.as_deref())?.train.unwrap_or_default();
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.knots {
            cfg.knots = v;
        }
        if let Some(v) = self.nu {
            cfg.nu = v;
        }
        if let Some(v) = self.inner_folds {
            cfg.inner_folds = v;
        }
        if let Some(v) = self.target_fdr {
            cfg.target_fdr = v;
        }
        if self.prior.is_some() {
            cfg.prior_malware_rate = self.prior;
        }
        if let Some(v) = self.min_trace_length {
            cfg.min_trace_length = v;
        }
        if let Some(c) = &self.criterion {
            cfg.criterion = parse_criterion(c)?;
        }
        cfg.categorization = map.categorization();
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Exit with status 1 when any trace is classified malicious.
    #[arg(long)]
    gate: bool,
    /// Override the model's probability threshold.
    #[arg(long)]
    tau: Option<f64>,
    #[command(flatten)]
    map: MapArgs,
    #[arg(required = true)]
    traces: Vec<PathBuf>,
}

#[derive(Args)]
struct MonitorArgs {
    #[arg(long)]
    model: PathBuf,
    /// Trace to read; `-` or absent reads standard input.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    ci_width_max: Option<f64>,
    #[arg(long)]
    cadence: Option<u64>,
    #[arg(long)]
    m_max: Option<u64>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    map: MapArgs,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Report path; standard output when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    roc_csv: Option<PathBuf>,
    /// FDR levels to report, comma separated.
    #[arg(long, value_delimiter = ',')]
    fdr: Option<Vec<f64>>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct RocArgs {
    /// Lines of `<score> <label 0|1>`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 5000)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Template rows that differ between classes.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    rows: Vec<usize>,
    /// Identical uniform templates for both classes.
    #[arg(long)]
    null: bool,
    /// JSON synthetic spec; replaces the other generator flags.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn check_map(model: &TrainedModel, map: &CategoryMap) -> Result<()> {
    if model.categorization != map.categorization() || model.num_categories != map.num_categories() {
        bail!(
            "model was trained with {} ({} categories) but the category map is {} ({} categories)",
            model.categorization.name(),
            model.num_categories,
            map.categorization().name(),
            map.num_categories()
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    load_model_file(path).with_context(|| format!("loading model {}", path.display()))
}

fn train(args: &TrainArgs) -> Result<()> {
    let map = args.flags.map.load()?;
    let cfg = args.flags.resolve(&map)?;
    let entries = read_manifest(&args.manifest).with_context(|| format!("reading {}", args.manifest.display()))?;
    let data = load_dataset(&entries, &map)?;
    let model = algorithm1_fit(&data, &cfg)?;
    for w in &model.metadata.warnings {
        eprintln!("warning: {w}");
    }
    let f = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    save_model(&model, BufWriter::new(f))?;
    Ok(())
}

#[derive(Serialize)]
struct ClassifyLine<'a> {
    trace: &'a str,
    instructions: u64,
    probability: f64,
    malicious: bool,
}

fn classify(args: &ClassifyArgs) -> Result<bool> {
    let model = load_model(&args.model)?;
    let map = args.map.load()?;
    check_map(&model, &map)?;
    let tau = args.tau.unwrap_or(model.threshold);
    let scorer = model.scorer()?;
    let mut out = io::stdout().lock();
    let mut any = false;
    for path in &args.traces {
        let seq = parse_trace_file(path, &map).with_context(|| format!("reading {}", path.display()))?;
        let counts = count_transitions(&seq, map.num_categories())?;
        let probability = scorer.probability(&counts)?;
        let malicious = probability > tau;
        any |= malicious;
        let line = ClassifyLine {
            trace: &seq.source_id,
            instructions: counts.instructions(),
            probability,
            malicious,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(any)
}

fn monitor(args: &MonitorArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let map = args.map.load()?;
    check_map(&model, &map)?;
    let mut rule = DecisionRule::for_model(&model);
    if let Some(r) = read_config(args.config.as_deref())?.monitor {
        rule = r;
    }
    if let Some(v) = args.tau {
        rule.tau = v;
    }
    if let Some(v) = args.ci_width_max {
        rule.ci_width_max = v;
    }
    if let Some(v) = args.cadence {
        rule.cadence = v;
    }
    if let Some(v) = args.m_max {
        rule.m_max = v;
    }
    if let Some(v) = args.draws {
        rule.draws = v;
    }
    if let Some(v) = args.seed {
        rule.seed = v;
    }
    let reader: Box<dyn BufRead> = match &args.input {
        Some(p) if p.as_os_str() != "-" => Box::new(BufReader::new(
            File::open(p).with_context(|| format!("opening {}", p.display()))?,
        )),
        _ => Box::new(BufReader::new(io::stdin())),
    };
    let mut mon = OnlineMonitor::new(&model, rule)?;
    let mut out = io::stdout().lock();
    let mut chunk = Vec::with_capacity(4096);
    let mut lines = reader.lines();
    loop {
        chunk.clear();
        for line in lines.by_ref() {
            if let Some(k) = map.categorize_line(&line?) {
                chunk.push(k);
                if chunk.len() == chunk.capacity() {
                    break;
                }
            }
        }
        if chunk.is_empty() {
            break;
        }
        for rec in mon.step(&chunk)? {
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
        out.flush()?;
    }
    if let Some(rec) = mon.finish()? {
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

fn cv(args: &CvArgs) -> Result<()> {
    let map = args.flags.map.load()?;
    let cfg = args.flags.resolve(&map)?;
    let entries = read_manifest(&args.manifest).with_context(|| format!("reading {}", args.manifest.display()))?;
    let data = load_dataset(&entries, &map)?;
    let levels = args.fdr.clone().unwrap_or_else(|| DEFAULT_FDR_LEVELS.to_vec());
    let report = kfold_cv(&data, args.folds, &cfg, &levels)?;
    if let Some(p) = &args.roc_csv {
        let curve = roc_curve(
            &report.scores.iter().map(|s| s.score).collect::<Vec<_>>(),
            &report.scores.iter().map(|s| s.label).collect::<Vec<_>>(),
        )?;
        std::fs::write(p, curve.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    write_output(args.out.as_deref(), &(report.to_json()? + "\n"))
}

fn roc(args: &RocArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.scores).with_context(|| format!("reading {}", args.scores.display()))?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(s), Some(l), None) = (it.next(), it.next(), it.next()) else {
            bail!("line {}: expected '<score> <label>'", i + 1);
        };
        scores.push(s.parse::<f64>().with_context(|| format!("line {}: score", i + 1))?);
        labels.push(match l {
            "0" => false,
            "1" => true,
            _ => bail!("line {}: label must be 0 or 1", i + 1),
        });
    }
    let curve = roc_curve(&scores, &labels)?;
    if let Some(p) = &args.csv {
        std::fs::write(p, curve.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    write_output(None, &(serde_json::to_string_pretty(&curve)? + "\n"))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).context("parsing synthetic spec")?,
        None if args.null => SyntheticSpec::null(8, args.per_class, args.length, args.seed),
        None => {
            if let Some(&r) = args.rows.iter().find(|&&r| r >= 8) {
                bail!("row {r} out of range for 8 categories");
            }
            SyntheticSpec::contrast(8, &args.rows, args.per_class, args.length, args.seed)
        }
    };
    let programs = generate_synthetic(&spec)?;
    let manifest = write_corpus(&args.out, &programs)?;
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    schema_version: u64,
    categorization: Categorization,
    num_categories: usize,
    active_predictors: usize,
    candidate_terms: usize,
    nonzero_terms: usize,
    intercept: f64,
    effective_intercept: f64,
    threshold: f64,
    linear_baseline_terms: usize,
    n_train: usize,
    n_malicious: usize,
    steps: &'a [mctrace_core::pipeline::StepSummary],
    warnings: &'a [String],
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let m = load_model(&args.model)?;
    let s = ModelSummary {
        schema_version: m.schema_version,
        categorization: m.categorization,
        num_categories: m.num_categories,
        active_predictors: m.active.len(),
        candidate_terms: m.terms.len(),
        nonzero_terms: m.coefficients.len(),
        intercept: m.intercept,
        effective_intercept: m.effective_intercept(),
        threshold: m.threshold,
        linear_baseline_terms: m.linear_baseline.slopes.len(),
        n_train: m.metadata.n_train,
        n_malicious: m.metadata.n_malicious,
        steps: &m.metadata.steps,
        warnings: &m.metadata.warnings,
    };
    write_output(None, &(serde_json::to_string_pretty(&s)? + "\n"))
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train(a) => train(a)?,
        Command::Classify(a) => {
            if classify(a)? && a.gate {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Monitor(a) => monitor(a)?,
        Command::Cv(a) => cv(a)?,
        Command::Roc(a) => roc(a)?,
        Command::Synth(a) => synth(a)?,
        Command::InspectModel(a) => inspect(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
