use std::path::PathBuf;
use std::process::exit;

use clap::{Parser, Subcommand, ValueEnum};

use hclrec_cli::exit_code;
use hclrec_cli::run::{self, AblateArgs, EvalArgs, PreprocessArgs, SweepArgs, TrainArgs};

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Format {
    /// user \t item \t timestamp
    Tsv,
    /// user,item,rating,timestamp rows without a header
    AmazonCsv,
    /// one review object per line
    YelpJson,
}

impl From<Format> for hclrec::corpus::InputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Tsv => hclrec::corpus::InputFormat::Tsv,
            Format::AmazonCsv => hclrec::corpus::InputFormat::AmazonCsv,
            Format::YelpJson => hclrec::corpus::InputFormat::YelpJson,
        }
    }
}

#[derive(Parser)]
#[command(name = "hclrec", version, about = "Sequential recommender with hierarchical contrastive training")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Filter an interaction log and write a preprocessed dataset directory
    Preprocess {
        /// Raw interaction file
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        /// Drop users and items with fewer interactions, to a joint fixpoint
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Keep each user's most recent items
        #[arg(long, default_value_t = 50)]
        max_len: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a preprocessed dataset and report test metrics
    Train {
        /// Dataset directory from `preprocess`
        #[arg(long)]
        data: PathBuf,
        /// Training config, key = value lines or JSON
        #[arg(long)]
        config: PathBuf,
        /// Config override, repeatable
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run directory for logs and checkpoints
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Neighbors kept per item in the substitution index
        #[arg(long, default_value_t = 10)]
        index_k: usize,
    },
    /// Rank held-out targets with a trained checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report short/long user cohorts split at this history length
        #[arg(long)]
        cohort_threshold: Option<usize>,
        /// Cutoffs, comma separated
        #[arg(long, value_delimiter = ',', default_value = "5,10")]
        ks: Vec<usize>,
        /// Also write per-user ranks to this CSV
        #[arg(long)]
        per_user: Option<PathBuf>,
        /// Also write the report to this JSON file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full method next to ablated variants on the same data and seed
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Comma list of no_blocks, flat_aug, no_warmup, coserec_mode; join with '+' to combine
        #[arg(long)]
        variants: String,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        index_k: usize,
    },
    /// Run every cell of a hyperparameter grid and chart each axis
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Grid file, JSON
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        index_k: usize,
    },
}

/// Die quietly when stdout is a closed pipe (`hclrec train ... | head`)
/// instead of panicking mid-print.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            exit(code);
        }
    };
    let result = match cli.command {
        Cmd::Preprocess {
            input,
            format,
            k,
            max_len,
            out,
        } => run::preprocess(&PreprocessArgs {
            input,
            format: format.into(),
            k,
            max_len,
            out,
        }),
        Cmd::Train {
            data,
            config,
            overrides,
            out,
            index_k,
        } => run::train(&TrainArgs {
            data,
            config,
            overrides,
            out,
            index_k,
        }),
        Cmd::Eval {
            checkpoint,
            data,
            cohort_threshold,
            ks,
            per_user,
            out,
        } => run::eval(&EvalArgs {
            checkpoint,
            data,
            cohort_threshold,
            ks,
            per_user,
            out,
        }),
        Cmd::Ablate {
            data,
            config,
            variants,
            overrides,
            out,
            index_k,
        } => run::ablate(&AblateArgs {
            data,
            config,
            variants,
            overrides,
            out,
            index_k,
        }),
        Cmd::Sweep {
            data,
            config,
            grid,
            out,
            index_k,
        } => run::sweep(&SweepArgs {
            data,
            config,
            grid,
            out,
            index_k,
        }),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        exit(exit_code(&e));
    }
}
