mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prada_core::diagnostics::TokenScore;
use prada_core::InputMode;

/// Detect and attribute images from autoregressive generators using
/// calibrated probability ratios of token likelihoods.
#[derive(Debug, Parser)]
#[command(name = "prada", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic real and generated record files from a profile.
    Synth(SynthArgs),
    /// Calibrate a score model per run and write a run manifest.
    Calibrate(CalibrateArgs),
    /// Score a record file with a calibrated model.
    Score(ScoreArgs),
    /// Ensemble detection over per-generator score tables.
    Detect(DetectArgs),
    /// Attribute images to generators and tally a confusion matrix.
    Attribute(AttributeArgs),
    /// Export diagnostic tables for plotting.
    #[command(subcommand)]
    Report(Report),
    /// List built-in synthetic profiles with their parameters.
    Profiles(ProfilesArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Built-in profile name (see `prada profiles`).
    #[arg(
        long,
        conflicts_with = "profile_file",
        required_unless_present = "profile_file"
    )]
    profile: Option<String>,
    /// Profile definition in TOML instead of a built-in name.
    #[arg(long)]
    profile_file: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    n_real: usize,
    #[arg(long, default_value_t = 500)]
    n_fake: usize,
    /// Overrides the profile's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_real: PathBuf,
    #[arg(long)]
    out_fake: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Real records.
    #[arg(long)]
    real: PathBuf,
    /// Generated records, extracted under the same generator.
    #[arg(long)]
    fake: PathBuf,
    /// TOML config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of calibration runs with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Model path. Run r is also written as <stem>.run<r>.json and the
    /// manifest as <stem>.manifest.json next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    weight_penalty: Option<f64>,
    #[arg(long)]
    noise_factor: Option<f64>,
    #[arg(long)]
    mode: Option<InputMode>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Keep alpha at 1.
    #[arg(long)]
    fixed_alpha: bool,
    /// Keep scale weights at 1/S.
    #[arg(long)]
    fixed_w: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// Records to score.
    #[arg(long = "in")]
    input: PathBuf,
    /// Score CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// Score CSVs, one per candidate generator, covering the same images.
    #[arg(long, num_args = 1.., required = true)]
    tables: Vec<PathBuf>,
    /// ROC points (fpr, tpr) CSV.
    #[arg(long)]
    roc_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AttributeArgs {
    #[arg(long, num_args = 1.., required = true)]
    tables: Vec<PathBuf>,
    /// CSV with image_id,source_label; defaults to the labels in the tables.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Minimum score (exclusive) for a generator verdict.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    threshold: f64,
    /// Row-normalized confusion CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-image verdict CSV.
    #[arg(long)]
    verdicts: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Report {
    /// AUROC of the mean token score, overall or per scale.
    ScaleAuroc {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        /// Token score: delta or icas.
        #[arg(long, default_value = "delta")]
        score: TokenScore,
        #[arg(long)]
        per_scale: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token-wise mean and std of the balanced ratio.
    TokenStats {
        #[arg(long)]
        records: PathBuf,
        #[arg(
            long,
            default_value_t = 1.0,
            allow_hyphen_values = true,
            conflicts_with = "model"
        )]
        alpha: f64,
        /// Take alpha from a calibrated model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Per-token CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-scale CSV.
        #[arg(long)]
        scales_out: Option<PathBuf>,
    },
    /// Empirical CDF of balanced ratios for real and generated records.
    Cdf {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        #[arg(
            long,
            default_value_t = 1.0,
            allow_hyphen_values = true,
            conflicts_with = "model"
        )]
        alpha: f64,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        grid: Grid,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learned token score over a grid (a 2-D surface for pair2d models).
    ScoreCurve {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        grid: Grid,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Alpha and the scale weights of a model.
    Weights {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Grid {
    #[arg(long, default_value_t = -15.0, allow_hyphen_values = true)]
    grid_min: f64,
    #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
    grid_max: f64,
    #[arg(long, default_value_t = 512)]
    grid_points: usize,
}

#[derive(Debug, Args)]
struct ProfilesArgs {
    /// Print only this profile, as TOML.
    #[arg(long)]
    name: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
