//! Command-line front end: synthesize data, train any of the five
//! architectures, evaluate, predict and analyze embeddings.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt;
use std::io::Write as _;
use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use s2v_core::analysis::DEFAULT_NEIGHBORS;
use s2v_core::nn::ModelKind;

pub mod commands;
pub mod config;

pub use commands::SplitChoice;
pub use config::RunConfig;

/// A problem with the command line or configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "s2v", version, about = "Embedding-augmented deep forecasting toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides the config)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config)
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Data CSV (overrides data.path)
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse::<ModelKind>().map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic market to CSV
    GenSynthetic {
        #[arg(long, default_value_t = 20)]
        series: usize,
        #[arg(long, default_value_t = 4)]
        groups: usize,
        #[arg(long, default_value_t = 750)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        factor_vol: Option<f64>,
        #[arg(long)]
        seasonal_amp: Option<f64>,
        #[arg(long)]
        idio_vol: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        ar: Option<f64>,
        #[arg(long)]
        price_spread: Option<f64>,
    },
    /// Train a model with its staged protocol
    Train {
        #[command(flatten)]
        common: Common,
        /// ts-tcn, ts-lstm, stock2vec, lstm-stock2vec or tcn-stock2vec
        #[arg(long, value_parser = parse_model)]
        model: Option<ModelKind>,
        /// Train missing pretrained modules of a hybrid first
        #[arg(long)]
        pretrain_auto: bool,
    },
    /// Score a checkpoint on one partition of the data
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
        split: SplitChoice,
    },
    /// Write predictions for every sample (optionally from a date on)
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: Option<NaiveDate>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// PCA and cosine neighbours of a learned embedding table
    AnalyzeEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "symbol")]
        feature: String,
        #[arg(short, long, default_value_t = DEFAULT_NEIGHBORS)]
        k: usize,
        /// Print the neighbours of this label
        #[arg(long)]
        neighbors: Option<String>,
        /// Scale vectors to unit length before PCA
        #[arg(long)]
        normalize: bool,
        /// Categorical column holding each label's group
        #[arg(long, default_value = "group")]
        group_column: String,
    },
}

impl From<&Common> for commands::Overrides {
    fn from(c: &Common) -> Self {
        commands::Overrides {
            config: c.config.clone(),
            model: None,
            seed: c.seed,
            out_dir: c.out_dir.clone(),
            data: c.data.clone(),
        }
    }
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenSynthetic {
            series,
            groups,
            days,
            seed,
            out,
            factor_vol,
            seasonal_amp,
            idio_vol,
            ar,
            price_spread,
        } => commands::gen_synthetic_cmd(&commands::GenArgs {
            series: *series,
            groups: *groups,
            days: *days,
            seed: *seed,
            out: out.clone(),
            factor_vol: *factor_vol,
            seasonal_amp: *seasonal_amp,
            idio_vol: *idio_vol,
            ar: *ar,
            price_spread: *price_spread,
        }),
        Command::Train {
            common,
            model,
            pretrain_auto,
        } => {
            let mut ov = commands::Overrides::from(common);
            ov.model = *model;
            commands::train_cmd(&ov, *pretrain_auto)
        }
        Command::Evaluate {
            common,
            checkpoint,
            split,
        } => commands::evaluate_cmd(&common.into(), checkpoint, *split),
        Command::Predict {
            common,
            checkpoint,
            from,
            out,
        } => commands::predict_cmd(&common.into(), checkpoint, *from, out),
        Command::AnalyzeEmbeddings {
            common,
            checkpoint,
            feature,
            k,
            neighbors,
            normalize,
            group_column,
        } => commands::analyze_cmd(
            &common.into(),
            &commands::AnalyzeArgs {
                checkpoint: checkpoint.clone(),
                feature: feature.clone(),
                k: *k,
                neighbors: neighbors.clone(),
                normalize: *normalize,
                group_column: group_column.clone(),
            },
        ),
    }
}

/// Log lines carry no timestamps so that repeated runs produce identical
/// output.
pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| writeln!(buf, "[{}] {}", rec.level(), rec.args()))
        .try_init();
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
