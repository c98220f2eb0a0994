//! Argument parsing and subcommand dispatch for the `mocha` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use mocha_core::evaltool::{
    bucketed_report, decile_edges, evaluate, export_alignment_trace, format_report, parse_results, write_results,
    write_traces, DEFAULT_BEAM,
};
use mocha_core::model::EncoderMode;
use mocha_core::objectives::MetricsLog;
use mocha_core::pipeline::{load_utterances, save_utterances, train_stage, Checkpoint, DataSource, Dataset, Stage, TrainConfig};
use mocha_core::selftest::run_selftest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

/// Environment variable holding the log filter, e.g. `debug` or `mocha_core=trace`.
pub const LOG_ENV: &str = "MOCHA_LOG";

const DEFAULT_OUT: &str = "mocha-out";

#[derive(Debug, Parser)]
#[command(name = "mocha", version, about = "Streaming MoChA with CTC-synchronous training")]
pub struct Cli {
    /// Seed for every random generator a command uses.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage; writes checkpoint.txt and metrics.tsv to the output directory.
    Train(TrainArgs),
    /// Beam-search decode a data file and score it.
    Decode(DecodeArgs),
    /// Export MoChA boundaries against CTC spikes.
    Align(AlignArgs),
    /// Length-bucketed WER from a decode results file.
    Report(ReportArgs),
    /// Run the built-in oracle and gradient suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; stage 1 defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stage-1 checkpoint to start stage 2 from.
    #[arg(long)]
    pub seed_checkpoint: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key=value` overrides applied after the config file.
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EncoderArgs {
    /// Encoder kind (lstm, blstm, lcblstm); defaults to the checkpoint stage's preset.
    #[arg(long)]
    pub encoder: Option<String>,
    /// Chunk size in raw frames, or `none`.
    #[arg(long)]
    pub n_c: Option<String>,
    /// Lookahead in raw frames.
    #[arg(long)]
    pub n_r: Option<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    pub beam: usize,
    /// JSON utterance file.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for results.tsv and summary.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Trace file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: PathBuf,
    /// Comma-separated frame-count edges; deciles of the results when omitted.
    #[arg(long)]
    pub buckets: Option<String>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Run only suites whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
    Selftest(usize),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
            Failure::Selftest(_) => EXIT_SELFTEST,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
            Failure::Selftest(n) => write!(f, "selftest: {n} check(s) failed"),
        }
    }
}

impl From<mocha_core::Error> for Failure {
    fn from(e: mocha_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Parses `argv` (program name first).
pub fn parse_args<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

/// Builds the training configuration: file (or stage-1 preset), then
/// overrides, then the command-line seed, checkpoint and output directory.
pub fn train_config(args: &TrainArgs, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            TrainConfig::parse(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::preset(Stage::Stage1),
    };
    for o in &args.overrides {
        cfg.apply_override(o).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = &args.seed_checkpoint {
        cfg.seed_checkpoint = Some(p.clone());
    }
    if let Some(p) = &args.out {
        cfg.output_dir = Some(p.clone());
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => train(&args, cli.seed),
        Command::Decode(args) => decode(&args),
        Command::Align(args) => align(&args),
        Command::Report(args) => report(&args),
        Command::Selftest(args) => selftest(&args),
    }
}

fn train(args: &TrainArgs, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = train_config(args, seed)?;
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    cfg.output_dir = Some(out.clone());
    cfg.require_seed_checkpoint(cfg.seed_checkpoint.is_some()).map_err(|e| Failure::Usage(e.to_string()))?;
    let init = cfg.seed_checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    fs::create_dir_all(&out)?;
    let data = Dataset::from_source(&cfg.data)?;
    if matches!(cfg.data, DataSource::Toy { .. }) {
        save_utterances(&out.join("train.json"), &data.train)?;
        save_utterances(&out.join("dev.json"), &data.dev)?;
    }
    info!("training {} on {} utterances, {} held out", cfg.stage, data.train.len(), data.dev.len());
    let sink: Box<dyn Write> = Box::new(std::io::BufWriter::new(fs::File::create(out.join("metrics.tsv"))?));
    let mut metrics = MetricsLog::new(sink)?;
    let outcome = train_stage(&cfg, &data, init, Some(&mut metrics))?;
    metrics.flush()?;
    let path = out.join("checkpoint.txt");
    outcome.checkpoint.save(&path)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "{} epochs, best epoch {}, final held-out loss {:.4}",
            outcome.history.len(),
            outcome.best_epoch.map_or_else(|| "-".to_string(), |e| e.to_string()),
            last.dev.total
        );
    }
    println!("checkpoint written to {}", path.display());
    Ok(())
}

fn encoder_mode(stage: Stage, args: &EncoderArgs) -> Result<EncoderMode, Failure> {
    let mut cfg = TrainConfig::preset(stage);
    for (key, value) in [("encoder", &args.encoder), ("n_c", &args.n_c), ("n_r", &args.n_r)] {
        if let Some(v) = value {
            cfg.set(key, v).map_err(|e| Failure::Usage(e.to_string()))?;
        }
    }
    Ok(cfg.encoder_mode())
}

fn decode(args: &DecodeArgs) -> Result<(), Failure> {
    if args.beam == 0 {
        return Err(Failure::Usage("--beam must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mode = encoder_mode(ckpt.stage, &args.encoder)?;
    let model = ckpt.into_model()?;
    let utts = load_utterances(&args.data)?;
    let summary = evaluate(&model, &utts, mode, args.beam)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("results.tsv"), write_results(&summary.results))?;
    let text = format!(
        "utterances\t{}\nwer\t{:.6}\nsequence_accuracy\t{:.6}\ntoken_accuracy\t{:.6}\nboundary_gap\t{:.6}\nmass_deviation\t{:.6}\n",
        utts.len(),
        summary.wer,
        summary.sequence_accuracy,
        summary.token_accuracy,
        summary.boundary_gap,
        summary.mass_deviation
    );
    fs::write(args.out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn align(args: &AlignArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mode = encoder_mode(ckpt.stage, &args.encoder)?;
    let model = ckpt.into_model()?;
    let utts = load_utterances(&args.data)?;
    let traces = utts.iter().map(|u| export_alignment_trace(&model, u, mode)).collect::<Result<Vec<_>, _>>()?;
    write_file(&args.out, &write_traces(&traces))?;
    let gaps: Vec<f64> = traces.iter().filter_map(|t| t.mean_gap()).collect();
    if !gaps.is_empty() {
        println!("mean boundary gap {:.3} frames over {} utterances", gaps.iter().sum::<f64>() / gaps.len() as f64, gaps.len());
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Parses `"10,20,40"` into bucket edges.
pub fn parse_edges(text: &str) -> Result<Vec<usize>, Failure> {
    text.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Failure::Usage(format!("invalid bucket edge '{s}'"))))
        .collect()
}

fn report(args: &ReportArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.results).map_err(|e| Failure::Runtime(format!("{}: {e}", args.results.display())))?;
    let results = parse_results(&text)?;
    let edges = match &args.buckets {
        Some(b) => parse_edges(b)?,
        None => decile_edges(&results.iter().map(|r| r.frames).collect::<Vec<_>>()),
    };
    let buckets = bucketed_report(&results, &edges).map_err(|e| Failure::Usage(e.to_string()))?;
    print!("{}", format_report(&buckets));
    Ok(())
}

fn selftest(args: &SelftestArgs) -> Result<(), Failure> {
    let report = run_selftest(args.filter.as_deref());
    if report.results.is_empty() {
        return Err(Failure::Usage(format!("no suite matches filter {:?}", args.filter.as_deref().unwrap_or(""))));
    }
    for r in &report.results {
        println!("{}", r.line());
    }
    match report.failures() {
        0 => Ok(()),
        n => Err(Failure::Selftest(n)),
    }
}
