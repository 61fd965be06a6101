//! `ascend` — pipeline driver: generate a synthetic cohort, build the
//! vocabulary, tokenize, sample fine-tuning indices, pretrain, fine-tune,
//! evaluate, and export embedding neighbors.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use ascend_core::config::RunConfig;
use ascend_core::pipeline;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ascend",
    version,
    about = "Phenotype-aware EHR sequence modeling pipeline",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; omitted fields fall back to the chosen preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort (events, demographics, ground truth).
    GenCohort {
        #[command(flatten)]
        common: Common,
        /// Number of patients override.
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Build the token vocabulary from the mapping file and events.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        /// Output path override for the vocabulary JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tokenize full patient histories for pretraining.
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample index dates with survival labels and tokenize their windows.
    SampleIndices {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-token pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Total optimization steps override.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Cox-loss fine-tuning of the five survival heads.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Epochs override.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate the fine-tuned model on the held-out test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Nearest tokens by embedding cosine similarity.
    Neighbors {
        #[command(flatten)]
        common: Common,
        /// Query token, e.g. PHENO_HYPERTENSION.
        #[arg(long)]
        token: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, ascend_core::config::ConfigError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = Some(seed);
    }
    Ok(config)
}

fn run() -> Result<(), AppError> {
    let cli = Cli::try_parse().map_err(AppError::Usage)?;
    match cli.command {
        Command::GenCohort { common, patients } => {
            let mut config = load_config(&common)?;
            if let Some(n) = patients {
                config.cohort.n_patients = n;
            }
            pipeline::gen_cohort(&config)?;
            println!(
                "cohort written: {} ({} patients)",
                config.paths.events.display(),
                config.cohort.n_patients
            );
        }
        Command::BuildVocab { common, out } => {
            let mut config = load_config(&common)?;
            if let Some(path) = out {
                config.paths.vocab = path;
            }
            let vocab = pipeline::build_vocab(&config)?;
            println!("vocabulary written: {} ({} tokens)", config.paths.vocab.display(), vocab.len());
        }
        Command::Tokenize { common, out } => {
            let mut config = load_config(&common)?;
            if let Some(path) = out {
                config.paths.sequences = path;
            }
            let n = pipeline::tokenize(&config)?;
            println!("sequences written: {} ({n} records)", config.paths.sequences.display());
        }
        Command::SampleIndices { common, out } => {
            let mut config = load_config(&common)?;
            if let Some(path) = out {
                config.paths.indices = path;
            }
            let n = pipeline::sample_indices(&config)?;
            println!("index samples written: {} ({n} records)", config.paths.indices.display());
        }
        Command::Pretrain { common, steps } => {
            let mut config = load_config(&common)?;
            if let Some(s) = steps {
                config.optimizer.total_steps = s;
            }
            let result = pipeline::run_pretrain(&config)?;
            let last = result.metrics.last();
            println!(
                "pretraining done at step {} (train loss {})",
                result.final_step,
                last.map(|r| format!("{:.4}", r.train_loss)).unwrap_or_else(|| "-".into())
            );
        }
        Command::Finetune { common, epochs } => {
            let mut config = load_config(&common)?;
            if let Some(e) = epochs {
                config.finetune.epochs = e;
            }
            let result = pipeline::run_finetune(&config)?;
            match (result.best_epoch, result.best_mean_c) {
                (Some(e), Some(c)) => println!("best epoch {e}: mean validation C-index {c:.4}"),
                _ => println!("fine-tuning finished (no validation C-index available)"),
            }
        }
        Command::Evaluate { common } => {
            let config = load_config(&common)?;
            let report = pipeline::run_evaluate(&config)?;
            print!("{}", ascend_core::metrics::render_table(&report));
            println!("report written: {}", config.paths.report_dir.display());
        }
        Command::Neighbors { common, token, k } => {
            let config = load_config(&common)?;
            let neighbors = pipeline::run_neighbors(&config, &token, k)?;
            for n in &neighbors {
                println!("{:<40} {:+.4}", n.token, n.cosine);
            }
        }
    }
    Ok(())
}

enum AppError {
    Usage(clap::Error),
    Config(ascend_core::config::ConfigError),
    Pipeline(pipeline::PipelineError),
}

impl From<ascend_core::config::ConfigError> for AppError {
    fn from(e: ascend_core::config::ConfigError) -> Self {
        AppError::Config(e)
    }
}

impl From<pipeline::PipelineError> for AppError {
    fn from(e: pipeline::PipelineError) -> Self {
        AppError::Pipeline(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(threads) = std::env::var("ASCEND_SEQ_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(e)) => {
            // clap renders its own help/version output on stdout with exit 0
            if e.use_stderr() {
                eprint!("{e}");
                ExitCode::from(1)
            } else {
                print!("{e}");
                ExitCode::SUCCESS
            }
        }
        Err(AppError::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(AppError::Pipeline(e)) if e.is_numeric() => {
            eprintln!("numeric failure: {e}");
            ExitCode::from(3)
        }
        Err(AppError::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
