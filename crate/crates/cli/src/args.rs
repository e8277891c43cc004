//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use omitopics::PoeMode;

#[derive(Debug, Parser)]
#[command(name = "omitopics", version, about = "Cross-domain multimodal topic model for single-cell counts")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// JSON run configuration
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Scenario file listing (domain, modality) pairs to mask
    #[arg(long, global = true, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
    /// Posterior fusion rule
    #[arg(long, global = true, value_enum)]
    pub poe_mode: Option<PoeArg>,
    /// Disable the neighborhood contrastive term
    #[arg(long, global = true)]
    pub no_ncl: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoeArg {
    Paper,
    Standard,
}

impl From<PoeArg> for PoeMode {
    fn from(a: PoeArg) -> Self {
        match a {
            PoeArg::Paper => PoeMode::PaperLiteral,
            PoeArg::Standard => PoeMode::PrecisionWeighted,
        }
    }
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known parameters
    Simulate {
        /// Built-in spec: citeseq, multiome or combine
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        /// JSON synthetic spec
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
    },
    /// Fit the model and write a checkpoint plus training log
    Train {
        /// Dataset manifest or its directory
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write the integrated embedding of every cell
    Embed {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Impute a modality a domain never measured
    Impute {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        modality: String,
    },
    /// Score clustering, classification and imputation
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Held-out matrices (manifest or directory)
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a small instance
    Gradcheck,
}
