//! The `pbam` command line.
//!
//! Exit codes: 0 success, 64 usage or configuration error, 65 bad or missing
//! input data, 70 internal failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::cluster::Algorithm;
use crate::error::{Error, Result};
pub use config::{RunConfig, TauScale, TrainerConfig};

pub const EXIT_USAGE: u8 = 64;
pub const EXIT_DATA: u8 = 65;
pub const EXIT_INTERNAL: u8 = 70;

#[derive(Debug, Parser)]
#[command(name = "pbam", version, about = "Student/teacher acoustic-model training with GTC and BMUF data-parallel trainers")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override the config document.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "plain|gtc|bmuf")]
    pub algo: Option<Algorithm>,
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// GTC threshold.
    #[arg(long, global = true, value_name = "F")]
    pub tau: Option<f32>,
    /// How the GTC threshold relates to gradient magnitude.
    #[arg(long, global = true, value_name = "raw|rms")]
    pub tau_scale: Option<String>,
    /// BMUF mini-batches per block.
    #[arg(long, global = true, value_name = "N")]
    pub block_size: Option<usize>,
    /// BMUF block momentum; zeta then follows from C.
    #[arg(long, global = true, value_name = "F", conflicts_with = "block_momentum_from_c")]
    pub eta: Option<f64>,
    #[arg(long = "C", global = true, value_name = "F")]
    pub c: Option<f64>,
    /// Set zeta = 1 and derive the block momentum from C.
    #[arg(long = "block-momentum-from-C", global = true)]
    pub block_momentum_from_c: bool,
    /// Top-k logits kept per frame.
    #[arg(long, global = true, value_name = "N")]
    pub k: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one data pipeline step.
    Pipeline {
        #[command(subcommand)]
        step: PipelineStep,
    },
    /// Train the teacher on the labeled set.
    Teacher,
    /// Prepare data if needed and train a student.
    Train,
    /// Compare finished runs.
    Report {
        /// Run directories; defaults to every run under the output directory.
        runs: Vec<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum PipelineStep {
    GenCorpus,
    Select,
    Shard,
    Normalize,
    Targets,
    Repartition,
}

impl Overrides {
    /// The config document (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.algo {
            cfg.trainer.algo = v;
        }
        if let Some(v) = self.workers {
            cfg.trainer.workers = v;
        }
        if let Some(v) = self.tau {
            cfg.trainer.tau = v;
        }
        if let Some(v) = &self.tau_scale {
            cfg.trainer.tau_scale = match v.as_str() {
                "raw" => TauScale::Raw,
                "rms" => TauScale::Rms,
                other => return Err(Error::InvalidConfig(format!("unknown tau scale {other:?}; expected raw or rms"))),
            };
        }
        if let Some(v) = self.block_size {
            cfg.trainer.block_size = v;
        }
        if let Some(v) = self.c {
            cfg.trainer.c = v;
        }
        if let Some(v) = self.eta {
            cfg.trainer.eta = Some(v);
        }
        if self.block_momentum_from_c {
            cfg.trainer.eta = None;
        }
        if let Some(v) = self.k {
            cfg.pipeline.k = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) => EXIT_USAGE,
        e if e.is_data_error() => EXIT_DATA,
        Error::InvalidInput(_) | Error::DimensionMismatch(_) => EXIT_DATA,
        _ => EXIT_INTERNAL,
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Runs a parsed command and returns what it prints on stdout.
pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = cli.overrides.resolve()?;
    match &cli.command {
        Command::Pipeline { step } => commands::pipeline(&cfg, *step),
        Command::Teacher => commands::teacher(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Report { runs, json } => commands::report(&cfg, runs, *json),
        Command::Config => cfg.to_toml(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("pbam").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let cli = parse(&["train", "--algo", "bmuf", "--workers", "8", "--block-size", "50", "--C", "2", "--k", "5"]);
        let cfg = cli.overrides.resolve().unwrap();
        assert_eq!(cfg.trainer.algo, Algorithm::Bmuf);
        assert_eq!((cfg.trainer.workers, cfg.trainer.block_size, cfg.pipeline.k), (8, 50, 5));
        assert_eq!(cfg.trainer.c, 2.0);
    }

    #[test]
    fn eta_conflicts_with_from_c() {
        let r = Cli::try_parse_from(["pbam", "train", "--eta", "0.5", "--block-momentum-from-C"]);
        assert!(r.is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::missing("a", "b")), EXIT_DATA);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_INTERNAL);
        let bad = parse(&["train", "--algo", "bmuf", "--eta", "1.5"]).overrides.resolve().unwrap_err();
        assert_eq!(exit_code(&bad), EXIT_USAGE);
    }
}
