//! `pss`: command-line front end of the pyramid-sampling HER2 pipeline.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "pss", version, about = "Pyramid-sampling HER2 scoring pipeline")]
pub struct Cli {
    /// Pipeline config JSON; flags given on the command line override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (0 = one per CPU). Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Detect tissue cores on a slide and write one PNG crop per core.
    ExtractCores(ExtractArgs),
    /// Export one PSS of a core as PNG patches plus a manifest.
    SamplePss(SamplePssArgs),
    /// Write a labeled synthetic core set and its manifest.
    Synth(SynthArgs),
    /// Write a synthetic slide and its ground-truth circles.
    SynthWsi(SynthWsiArgs),
    /// Train the reference micro-CNN from a manifest.
    Train(TrainArgs),
    /// Score cores with a model or with external predictions.
    Score(ScoreArgs),
    /// Monte Carlo (N, k) sweep over a prediction pool.
    Montecarlo(MonteCarloArgs),
    /// Resolve pathologist votes into consensus labels.
    Consensus(ConsensusArgs),
    /// Accuracy, confusion matrix and KCS histograms of score reports.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct PssArgs {
    /// Patch side in pixels.
    #[arg(long, default_value_t = 512)]
    pub patch_size: usize,
    /// Full-resolution patches per PSS.
    #[arg(long, default_value_t = 40)]
    pub n_full: usize,
    /// Half-resolution patches per PSS.
    #[arg(long, default_value_t = 10)]
    pub n_half: usize,
    /// Append the whole core resized to one patch.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub include_whole: bool,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub wsi: PathBuf,
    /// Output directory for crops and `detections.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Smallest core radius, full-resolution pixels.
    #[arg(long)]
    pub r_min: Option<f64>,
    /// Largest core radius, full-resolution pixels.
    #[arg(long)]
    pub r_max: Option<f64>,
    /// Power-of-two factor of the detection proxy.
    #[arg(long, default_value_t = 8)]
    pub downsample: usize,
    /// Crop margin as a fraction of the diameter.
    #[arg(long, default_value_t = 0.05)]
    pub margin: f64,
}

#[derive(Args, Debug)]
pub struct SamplePssArgs {
    #[arg(long)]
    pub core: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Which PSS of the scoring batch to export (same seed as `score`).
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[command(flatten)]
    pub pss: PssArgs,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of classes, starting at 0.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=4))]
    pub classes: u64,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    /// Core raster side in pixels.
    #[arg(long, default_value_t = 512)]
    pub diameter: usize,
    /// Fraction of each class assigned to validation.
    #[arg(long, default_value_t = 0.0755)]
    pub val_fraction: f64,
    /// Fraction of each class assigned to test.
    #[arg(long, default_value_t = 0.2436)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthWsiArgs {
    /// Slide PNG to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth JSON; defaults to `<out stem>_truth.json` next to the slide.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    pub cores: usize,
    #[arg(long, default_value_t = 400)]
    pub radius: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `path,label,split` CSV; test rows are ignored.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model container to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value = "1e-5")]
    pub initial_lr: f64,
    #[arg(long, default_value_t = 12)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Epochs without validation improvement before the LR drops.
    #[arg(long, default_value_t = 5)]
    pub plateau_patience: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr_factor: f64,
    #[arg(long, default_value = "1e-7")]
    pub min_lr: f64,
    #[arg(long, default_value_t = 30)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub pss: PssArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Confidence {
    Top1,
    Margin,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["core", "preds"]))]
pub struct ScoreArgs {
    /// Core image to sample and classify with `--model`.
    #[arg(long, requires = "model")]
    pub core: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// External predictions JSONL; every sample in it is scored.
    #[arg(long, conflicts_with = "model")]
    pub preds: Option<PathBuf>,
    /// Sample id for `--core` (default: file stem), or the only sample to
    /// score from `--preds`.
    #[arg(long)]
    pub sample_id: Option<String>,
    /// PSSs per core.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Highest-confidence PSSs kept.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Confidence::Top1)]
    pub confidence: Confidence,
    /// Report JSONL, one line per sample.
    #[arg(long)]
    pub report: PathBuf,
    /// Also write every per-PSS prediction (model mode only).
    #[arg(long, requires = "core")]
    pub predictions: Option<PathBuf>,
    #[command(flatten)]
    pub pss: PssArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingArg {
    WithoutReplacement,
    WithReplacement,
}

#[derive(Args, Debug)]
pub struct MonteCarloArgs {
    #[arg(long)]
    pub preds: PathBuf,
    /// `sample_id,score` CSV.
    #[arg(long)]
    pub labels: PathBuf,
    /// N values: `a:b`, `a:b:step` or a comma list.
    #[arg(long, default_value = "20")]
    pub n_grid: String,
    /// k values in the same syntax, or `paper` for 1..20,30,50,100.
    #[arg(long, default_value = "5")]
    pub k_grid: String,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SamplingArg::WithoutReplacement)]
    pub sampling: SamplingArg,
    #[arg(long, value_enum, default_value_t = Confidence::Top1)]
    pub confidence: Confidence,
    /// Summary CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Full statistics, including confusion matrices, as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConsensusArgs {
    /// `core_id,pathologist_id,score` CSV; adjudicator rows use `ADJ`.
    #[arg(long)]
    pub votes: PathBuf,
    /// Per-core outcome CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON; printed to stdout when omitted.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffPairArg {
    CountAsWrong,
    Exclude,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Report JSONL written by `score`.
    #[arg(long)]
    pub reports: PathBuf,
    /// `sample_id,score` CSV covering every reported sample.
    #[arg(long)]
    pub labels: PathBuf,
    /// Evaluation summary JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// KCS histogram report JSON.
    #[arg(long)]
    pub histograms: Option<PathBuf>,
    /// KCS histogram CSV.
    #[arg(long)]
    pub histograms_csv: Option<PathBuf>,
    /// Adjacent-pair handling of predictions outside the pair.
    #[arg(long, value_enum, default_value_t = OffPairArg::CountAsWrong)]
    pub off_pair: OffPairArg,
}

fn run(args: Vec<std::ffi::OsString>) -> Result<(), (i32, String)> {
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 3,
            };
            let _ = e.print();
            return if code == 0 { Ok(()) } else { Err((code, String::new())) };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| (3, e.to_string()))?;
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let fail = |e: CliError| (e.exit_code(), e.to_string());
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| (3, format!("thread pool: {e}")))?;
    }
    let loaded = config::Loaded::from_file(cli.config.as_deref()).map_err(fail)?;
    commands::dispatch(&cli.command, sub, loaded).map_err(fail)
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(code as u8)
        }
    }
}
