//! `effecg` command-line tool.

mod commands;
mod config;
mod error;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, InferArgs, Subset, SynthArgs};
use error::{usage, CliResult};

#[derive(Parser, Debug)]
#[command(name = "effecg", version, about = "ECG classification toolkit")]
struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic records plus a ground-truth fiducial CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        beats: usize,
        /// Heart rate in [30, 220]; ignored with --classes.
        #[arg(long, default_value_t = 75.0)]
        bpm: f64,
        #[arg(long, default_value_t = 500.0)]
        fs: f64,
        /// White-noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        leads: usize,
        /// Labelled classification data with this many classes.
        #[arg(long)]
        classes: Option<usize>,
        /// Age, gender and rhythm labels (needs --classes 3).
        #[arg(long)]
        multi_label: bool,
        /// Record length in seconds with --classes; defaults to beats * 60 / bpm.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Filter records and write them with their detected fiducials.
    Preprocess {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Train a model; writes the checkpoint, history and resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        outdir: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on labelled data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run config, usually the training run's config.resolved.json.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Subset::All)]
        subset: Subset,
        /// One threshold for all classes or one per class, comma-separated.
        #[arg(long)]
        thresholds: Option<String>,
        /// Report path; ROC and confusion artifacts go next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Write per-record scores and predicted labels.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Only these cases (comma-separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Route this case through a deliberately wrong adjoint.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Count records by age bin and gender.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Classes to count; all when empty.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        bin_width: u32,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        outdir: Option<PathBuf>,
    },
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("EFFECG_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(format!("EFFECG_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Synth {
            out,
            count,
            seed,
            beats,
            bpm,
            fs,
            noise,
            leads,
            classes,
            multi_label,
            duration,
        } => commands::synth(&SynthArgs {
            out,
            count,
            seed,
            beats,
            bpm,
            fs,
            noise,
            leads,
            classes,
            multi_label,
            duration,
        }),
        Command::Preprocess { config, data, outdir } => commands::preprocess_cmd(config.as_deref(), data, &outdir),
        Command::Train {
            config,
            data,
            outdir,
            seed,
        } => commands::train(config.as_deref(), data, &outdir, seed),
        Command::Eval {
            checkpoint,
            data,
            config,
            subset,
            thresholds,
            report,
        } => commands::eval(&EvalArgs {
            checkpoint,
            data,
            config,
            subset,
            thresholds,
            report,
        }),
        Command::Infer {
            checkpoint,
            data,
            config,
            thresholds,
            outdir,
        } => commands::infer(&InferArgs {
            checkpoint,
            data,
            config,
            thresholds,
            outdir,
        }),
        Command::Gradcheck {
            seed,
            trials,
            only,
            inject_fault,
        } => commands::gradcheck(seed, trials, only, inject_fault),
        Command::Analyze {
            config,
            data,
            labels,
            bin_width,
            bins,
            outdir,
        } => commands::analyze(config.as_deref(), data, &labels, bin_width, bins, outdir.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
