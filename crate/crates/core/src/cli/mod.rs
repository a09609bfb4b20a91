//! Stage commands over a work directory.
//!
//! Every stage reads the run config, takes the workdir lock, checks that
//! its upstream manifest exists and writes its outputs under
//! `<workdir>/<domain>/`.

mod config;
mod stages;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::backends::corpus::{write_mock_corpus, CorpusSpec};
use crate::domain::load_domain_config;
use crate::error::{AppealError, Result};
use crate::eval::{correlations, format_table, toy_harness, ToyOptions};
use crate::manifest::{read_jsonl, write_json};

pub use config::{load_run_config, PipelineConfig, RunConfig};
pub use stages::{Ctx, Reserved, WorkdirLock};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_STAGE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "appeal", version, about = "Content-appeal dataset, model and enhancement pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, short)]
    pub config: PathBuf,
    /// Output directory (default: next to each image) or, for `score`, a JSONL file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalCorrArgs {
    /// Predictions, JSONL.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference scores, JSONL.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Numeric field of `--pred` rows (default: first of scaled, score, alpha_truth, raw, value).
    #[arg(long)]
    pub pred_field: Option<String>,
    #[arg(long)]
    pub ref_field: Option<String>,
    /// Join key (default: image_id, else id).
    #[arg(long)]
    pub key: Option<String>,
    /// Row label in the table (default: the `--pred` file stem).
    #[arg(long)]
    pub name: Option<String>,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write manifests, images and the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub images: usize,
    #[arg(long, default_value_t = 80)]
    pub bases: usize,
    /// Epochs for every training stage (default: the standard schedule).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Skip training entirely.
    #[arg(long)]
    pub negative_control: bool,
    /// Fail (exit 2) when SRCC falls below this.
    #[arg(long)]
    pub min_srcc: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Domain config (TOML).
    #[arg(long)]
    pub domain: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub per_query: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expand the domain's adjectives and nouns into search queries.
    Queries(ConfigArg),
    /// Retrieve thumbnails for every query.
    Fetch(ConfigArg),
    /// Normalise, caption, segment, area-filter and balance.
    Filter(ConfigArg),
    /// Train polarity embeddings and generate the synthetic set.
    Synth(ConfigArg),
    /// Train the pairwise comparator on synthetic pairs.
    TrainComparator(ConfigArg),
    /// Vote and scale appeal labels for the real images.
    Label(ConfigArg),
    /// Train the absolute estimator on the labels.
    TrainEstimator(ConfigArg),
    /// Print estimator scores.
    Score(ImageArgs),
    /// Write appeal heatmaps and overlays.
    Heatmap(ImageArgs),
    /// Heatmap-gated enhancement with a before/after report.
    Enhance(ImageArgs),
    /// Correlation and error metrics between two JSONL score files.
    EvalCorr(EvalCorrArgs),
    /// End-to-end run on a synthetic toy domain with known appeal.
    ToyHarness(ToyArgs),
    /// Write a synthetic search corpus for the mock image source.
    MockCorpus(CorpusArgs),
}

/// Exit status for an error: 1 for bad input, 2 for a failed stage.
pub fn exit_code(err: &AppealError) -> i32 {
    match err {
        AppealError::Validation { .. }
        | AppealError::Format { .. }
        | AppealError::Unbound { .. }
        | AppealError::MissingPrerequisite { .. }
        | AppealError::DimensionMismatch { .. }
        | AppealError::Undefined(_) => EXIT_INVALID,
        _ => EXIT_STAGE,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn locked(config: &Path, f: impl FnOnce(&Ctx) -> Result<()>) -> Result<()> {
    let ctx = Ctx::load(config)?;
    let _lock = WorkdirLock::acquire(&ctx.dir)?;
    f(&ctx)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Queries(a) => locked(&a.config, stages::queries),
        Command::Fetch(a) => locked(&a.config, stages::fetch),
        Command::Filter(a) => locked(&a.config, stages::filter),
        Command::Synth(a) => locked(&a.config, stages::synth),
        Command::TrainComparator(a) => locked(&a.config, stages::train_comparator_stage),
        Command::Label(a) => locked(&a.config, stages::label),
        Command::TrainEstimator(a) => locked(&a.config, stages::train_estimator_stage),
        Command::Score(a) => stages::score(&Ctx::load(&a.config)?, &a.images, a.out.as_deref()),
        Command::Heatmap(a) => stages::heatmap(&Ctx::load(&a.config)?, &a.images, a.out.as_deref()),
        Command::Enhance(a) => stages::enhance_images(&Ctx::load(&a.config)?, &a.images, a.out.as_deref()),
        Command::EvalCorr(a) => eval_corr(&a),
        Command::ToyHarness(a) => toy(&a),
        Command::MockCorpus(a) => mock_corpus(&a),
    }
}

const SCORE_FIELDS: [&str; 5] = ["scaled", "score", "alpha_truth", "raw", "value"];

fn pick_field(rows: &[Value], wanted: Option<&str>, path: &Path) -> Result<String> {
    if let Some(f) = wanted {
        return Ok(f.to_owned());
    }
    let first = rows.first().ok_or_else(|| AppealError::validation("scores", format!("{} is empty", path.display())))?;
    SCORE_FIELDS
        .iter()
        .find(|f| first.get(**f).is_some_and(Value::is_number))
        .map(|f| (*f).to_owned())
        .ok_or_else(|| {
            AppealError::validation(
                "field",
                format!("{} has none of {}; pass a field name", path.display(), SCORE_FIELDS.join(", ")),
            )
        })
}

fn key_of(row: &Value, key: Option<&str>) -> Option<String> {
    let v = match key {
        Some(k) => row.get(k)?,
        None => row.get("image_id").or_else(|| row.get("id"))?,
    };
    Some(match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    })
}

/// `(key, value)` for every row, in file order.
fn scores(path: &Path, field: Option<&str>, key: Option<&str>) -> Result<Vec<(String, f64)>> {
    let rows: Vec<Value> = read_jsonl(path)?;
    let field = pick_field(&rows, field, path)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let bad = |what: &str| AppealError::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {what}", i + 1),
            };
            let k = key_of(row, key).ok_or_else(|| bad("missing join key"))?;
            let v = row.get(&field).and_then(Value::as_f64).ok_or_else(|| bad(&format!("`{field}` is not a number")))?;
            Ok((k, v))
        })
        .collect()
}

fn eval_corr(a: &EvalCorrArgs) -> Result<()> {
    let pred = scores(&a.pred, a.pred_field.as_deref(), a.key.as_deref())?;
    let reference: std::collections::HashMap<String, f64> =
        scores(&a.reference, a.ref_field.as_deref(), a.key.as_deref())?.into_iter().collect();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (k, v) in &pred {
        if let Some(r) = reference.get(k) {
            x.push(*v);
            y.push(*r);
        }
    }
    if x.len() < pred.len() {
        log::warn!("{} of {} predictions have no reference", pred.len() - x.len(), pred.len());
    }
    let report = correlations(&x, &y)?;
    let name = a
        .name
        .clone()
        .or_else(|| a.pred.file_stem().and_then(|s| s.to_str()).map(str::to_owned))
        .unwrap_or_else(|| "pred".into());
    println!("{}", serde_json::to_string_pretty(&report)?);
    print!("{}", format_table(&[(name, report.clone())]));
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn mock_corpus(a: &CorpusArgs) -> Result<()> {
    let domain = load_domain_config(&a.domain)?;
    let spec = CorpusSpec {
        per_query: a.per_query,
        seed: a.seed,
        ..CorpusSpec::default()
    };
    let n = write_mock_corpus(&domain, &a.out, &spec)?;
    println!("{n} images -> {}", a.out.display());
    Ok(())
}

fn toy(a: &ToyArgs) -> Result<()> {
    let mut opts = ToyOptions {
        n_images: a.images,
        n_bases: a.bases,
        out_dir: a.out.clone(),
        ..ToyOptions::default()
    };
    if let Some(e) = a.epochs {
        opts.train = opts.train.with_epochs(e);
    }
    if a.negative_control {
        opts = opts.negative_control();
    }
    let report = toy_harness(a.seed, &opts)?;
    let label = if a.negative_control { "toy (no training)" } else { "toy" };
    print!("{}", format_table(&[(label.to_owned(), report.labels_vs_alpha.clone())]));
    println!(
        "synthetic {}, pairs {}, exemplars {}, final train L1 {:.4}",
        report.n_synthetic, report.n_pairs, report.n_exemplars, report.train.final_train_loss
    );
    if let Some(min) = a.min_srcc {
        if report.labels_vs_alpha.srcc < min {
            return Err(AppealError::Stage {
                stage: "toy-harness".into(),
                message: format!("SRCC {:.4} is below {min}", report.labels_vs_alpha.srcc),
            });
        }
    }
    Ok(())
}
