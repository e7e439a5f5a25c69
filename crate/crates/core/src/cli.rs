//! Command-line front end.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 usage or configuration
//! error, 3 unreadable/unwritable file, 4 malformed data or model file,
//! 5 schema mismatch between model file and data, 6 training diverged,
//! 7 self-check failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::data::{load_csv, load_unlabeled_csv, split, Dataset};
use crate::error::Error;
use crate::eval::{auc, format_percent, logloss, ScoredSet};
use crate::model_file::{train_model, ModelFile, ModelKind, TrainedModel};
use crate::synth::{self, SynthConfig};
use crate::train::{grid_search, write_grid_csv, GridSpec, TrainConfig, TrainReport};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_SCHEMA: i32 = 5;
pub const EXIT_DIVERGED: i32 = 6;
pub const EXIT_SELFCHECK: i32 = 7;

#[derive(Debug, Parser)]
#[command(name = "deepctr", version, about = "Click-through-rate models over multi-field categorical data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write it to a model file.
    Train(TrainArgs),
    /// Score a CSV file with a trained model.
    Predict(PredictArgs),
    /// Print AUC and log loss of a scores file.
    Eval(EvalArgs),
    /// Train every cell of a hyperparameter grid and rank them by validation AUC.
    Gridsearch(GridArgs),
    /// Run the built-in numerical oracle checks.
    Selfcheck,
    /// Write a synthetic dataset drawn from a planted factorisation machine.
    Synth(SynthArgs),
}

/// Comma-separated list, e.g. `200,300,100`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|_| format!("cannot parse `{p}`")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the 0/1 label column.
    #[arg(long, default_value = synth::LABEL_COLUMN)]
    pub label_col: String,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub split: List<f64>,
}

/// Overrides applied on top of the config file.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Choose the learning rate from the config's `lr_grid` on validation AUC.
    #[arg(long)]
    pub select_lr: bool,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Dropout keep probability.
    #[arg(long)]
    pub keep_prob: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    /// Hidden layer sizes, e.g. `200,300,100`.
    #[arg(long)]
    pub hidden: Option<List<usize>>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Negative units per field for SNN pre-training.
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: ModelKind,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch training report CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Label column copied into the output when present in the data.
    #[arg(long, default_value = synth::LABEL_COLUMN)]
    pub label_col: String,
    /// Scores CSV to write (`row_index,score[,label]`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Label column of the scores file.
    #[arg(long, default_value = "label")]
    pub labels_col: String,
    /// Score column of the scores file.
    #[arg(long, default_value = "score")]
    pub score_col: String,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub model: ModelKind,
    /// JSON grid specification.
    #[arg(long)]
    pub grid: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Ranked results table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    pub fields: usize,
    #[arg(long, default_value_t = 10)]
    pub cardinality: usize,
    #[arg(long, default_value_t = 24_000)]
    pub instances: usize,
    /// Latent dimension of the planted teacher.
    #[arg(long, default_value_t = 4)]
    pub planted_k: usize,
    /// Standard deviation of the teacher's pairwise term.
    #[arg(long, default_value_t = 3.0)]
    pub interaction_scale: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of a subcommand together with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => EXIT_IO,
            Error::Csv(c) if c.is_io_error() => EXIT_IO,
            Error::InvalidConfig(_) => EXIT_USAGE,
            Error::SchemaMismatch(_) => EXIT_SCHEMA,
            Error::NonFinite(_) | Error::AllDiverged => EXIT_DIVERGED,
            Error::EmptySchema
            | Error::DuplicateField(_)
            | Error::InvalidLabel(_)
            | Error::IndexOutOfRange { .. }
            | Error::DimensionMismatch(_)
            | Error::EmptyDataset(_)
            | Error::SingleClass
            | Error::MissingColumn(_)
            | Error::Csv(_)
            | Error::ModelFormat(_) => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let stdout = io::stdout();
    match execute(cli.command, &mut stdout.lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Train(a) => train(a, out),
        Command::Predict(a) => predict(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gridsearch(a) => gridsearch(a, out),
        Command::Selfcheck => selfcheck(out),
        Command::Synth(a) => synth(a, out),
    }
}

fn write_out(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> CliResult {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e).into())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e).into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())).into())
}

/// Defaults, then the config file, then explicit flags.
pub fn resolve_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if args.select_lr {
        cfg.select_learning_rate = true;
    }
    if let Some(v) = args.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.patience {
        cfg.patience = v;
    }
    if let Some(v) = args.keep_prob {
        cfg.keep_prob = Some(v);
    }
    if let Some(v) = args.l2 {
        cfg.l2_lambda = v;
    }
    if let Some(v) = &args.hidden {
        cfg.hidden.clone_from(&v.0);
    }
    if let Some(v) = args.latent_dim {
        cfg.latent_dim = v;
    }
    if let Some(v) = args.negatives {
        cfg.negatives = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split_fractions(list: &List<f64>) -> CliResult<[f64; 3]> {
    <[f64; 3]>::try_from(list.0.as_slice())
        .map_err(|_| Error::config("--split takes exactly three fractions").into())
}

fn load_split(args: &DataArgs, seed: u64) -> CliResult<(Dataset, Dataset, Dataset)> {
    let fractions = split_fractions(&args.split)?;
    let data = load_csv(&args.data, &args.label_col, None)?;
    log::info!("loaded {} rows, one-hot dimension {}", data.len(), data.schema().dim());
    Ok(split(&data, fractions, seed)?)
}

/// Config columns prepended to every report row.
pub fn report_columns(kind: ModelKind, cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    let hidden = cfg.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
    vec![
        ("model", kind.to_string()),
        ("learning_rate", cfg.learning_rate.to_string()),
        ("keep_prob", cfg.keep_prob.map_or_else(String::new, |p| p.to_string())),
        ("l2_lambda", cfg.l2_lambda.to_string()),
        ("hidden", hidden),
        ("seed", cfg.seed.to_string()),
    ]
}

pub fn write_report(path: &Path, kind: ModelKind, cfg: &TrainConfig, report: &TrainReport) -> CliResult {
    report.write_csv(create(path)?, &report_columns(kind, cfg))?;
    Ok(())
}

fn score_line(out: &mut dyn Write, name: &str, model: &TrainedModel, data: &Dataset) -> CliResult {
    let scored = ScoredSet::new(model.predict_all(data)?, data.labels())?;
    match auc(&scored) {
        Ok(a) => write_out(
            out,
            format_args!("{name} AUC {a:.6} ({}) logloss {:.6}", format_percent(a), logloss(&scored)?),
        ),
        Err(Error::SingleClass) => write_out(out, format_args!("{name} logloss {:.6} (single class, no AUC)", logloss(&scored)?)),
        Err(e) => Err(e.into()),
    }
}

fn train(args: TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = resolve_config(&args.config)?;
    let (train, valid, test) = load_split(&args.data, cfg.seed)?;
    let (model, report, cfg) = train_model(args.model, &train, &valid, &cfg)?;
    let best = report.best();
    write_out(
        out,
        format_args!(
            "{}: {} epochs, best epoch {} (valid loss {:.6})",
            args.model,
            report.epochs.len(),
            report.best_epoch,
            best.valid_loss
        ),
    )?;
    if !test.is_empty() {
        score_line(out, "test", &model, &test)?;
    }
    if let Some(path) = &args.report {
        write_report(path, args.model, &cfg, &report)?;
    }
    ModelFile::new(model, train.schema().clone(), cfg).save(&args.out)?;
    Ok(())
}

fn predict(args: PredictArgs, out: &mut dyn Write) -> CliResult {
    let file = ModelFile::load(&args.model_file)?;
    let schema = std::sync::Arc::new(file.schema.clone());
    let (data, has_labels) = load_unlabeled_csv(&args.data, Some(&args.label_col), schema)?;
    let scores = file.model.predict_all(&data)?;
    let mut w = csv::Writer::from_writer(create(&args.out)?);
    let mut header = vec!["row_index", "score"];
    if has_labels {
        header.push("label");
    }
    w.write_record(&header).map_err(Error::from)?;
    for (i, (s, inst)) in scores.iter().zip(data.instances()).enumerate() {
        let mut row = vec![i.to_string(), s.to_string()];
        if has_labels {
            row.push(inst.label.to_string());
        }
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(&args.out, e))?;
    write_out(out, format_args!("scored {} rows", scores.len()))
}

/// Reads `score` and `label` columns from a scores CSV.
pub fn read_scores(path: &Path, score_col: &str, label_col: &str) -> Result<ScoredSet, Error> {
    let mut rdr = csv::Reader::from_reader(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = rdr.headers()?.clone();
    let pos = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (si, li) = (pos(score_col)?, pos(label_col)?);
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let s = rec.get(si).unwrap_or("").trim();
        scores.push(
            s.parse::<f64>()
                .map_err(|_| Error::DimensionMismatch(format!("score `{s}` is not a number")))?,
        );
        let l = rec.get(li).unwrap_or("").trim();
        labels.push(match l {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::InvalidLabel(other.to_string())),
        });
    }
    ScoredSet::new(scores, labels)
}

fn eval(args: EvalArgs, out: &mut dyn Write) -> CliResult {
    let scored = read_scores(&args.scores, &args.score_col, &args.labels_col)?;
    let a = auc(&scored)?;
    write_out(out, format_args!("AUC {a:.6} ({})", format_percent(a)))?;
    write_out(out, format_args!("logloss {:.6}", logloss(&scored)?))
}

fn gridsearch(args: GridArgs, out: &mut dyn Write) -> CliResult {
    let spec: GridSpec = read_json(&args.grid)?;
    spec.base.validate()?;
    let cells = spec.expand();
    for c in &cells {
        c.config.validate()?;
    }
    let (train, valid, _) = load_split(&args.data, spec.base.seed)?;
    log::info!("running {} grid cells", cells.len());
    let rows = grid_search(&args.model, &train, &valid, &cells)?;
    write_grid_csv(&rows, create(&args.out)?)?;
    if let Some(top) = rows.first().filter(|r| r.outcome.is_some()) {
        let auc = top.outcome.as_ref().and_then(|o| o.valid_auc);
        write_out(
            out,
            format_args!(
                "best cell {} [{}]: valid AUC {}",
                top.index,
                top.label,
                auc.map_or_else(|| "n/a".into(), format_percent)
            ),
        )?;
    }
    Ok(())
}

fn selfcheck(out: &mut dyn Write) -> CliResult {
    let results = verify::selfcheck();
    let mut failed = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed);
        write_out(out, format_args!("{tag} {:<20} {}", r.name, r.detail))?;
    }
    if failed > 0 {
        return Err(CliError {
            code: EXIT_SELFCHECK,
            message: format!("{failed} of {} checks failed", results.len()),
        });
    }
    write_out(out, format_args!("all {} checks passed", results.len()))
}

fn synth(args: SynthArgs, out: &mut dyn Write) -> CliResult {
    let cfg = SynthConfig {
        fields: args.fields,
        cardinality: args.cardinality,
        instances: args.instances,
        planted_k: args.planted_k,
        interaction_scale: args.interaction_scale,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let data = synth::generate(&cfg)?.dataset;
    data.write_csv(create(&args.out)?, synth::LABEL_COLUMN)?;
    write_out(
        out,
        format_args!("wrote {} rows ({} positive) to {}", data.len(), data.positives(), args.out.display()),
    )
}
