//! Run configuration: one TOML document, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bmuf::BmufConfig;
use crate::cluster::cost::CostModel;
use crate::cluster::{Algorithm, WorkerConfig};
use crate::datapipe::corpus::CorpusConfig;
use crate::datapipe::pipeline::PipelineConfig;
use crate::error::{Error, Result};
use crate::gtc::{GtcConfig, DEFAULT_TAU};
use crate::recipe::TeacherConfig;
use crate::schedule::ScheduleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauScale {
    /// `tau` applies to raw mini-batch-mean gradients.
    Raw,
    /// `tau` is multiplied by the power of two nearest the RMS of the
    /// initial model's gradient on the first training mini-batch.
    Rms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub algo: Algorithm,
    pub workers: usize,
    pub batch_size: usize,
    pub momentum: f32,
    /// Student hidden layer widths.
    pub hidden: Vec<usize>,
    pub tau: f32,
    pub tau_scale: TauScale,
    pub warmup_steps: u64,
    pub block_size: usize,
    #[serde(rename = "C")]
    pub c: f64,
    /// Block momentum; when absent it follows from `C` with `zeta = 1`.
    pub eta: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algo: Algorithm::Plain,
            workers: 1,
            batch_size: 32,
            momentum: 0.0,
            hidden: vec![64, 64],
            tau: DEFAULT_TAU,
            tau_scale: TauScale::Raw,
            warmup_steps: 0,
            block_size: 100,
            c: 1.0,
            eta: None,
        }
    }
}

impl TrainerConfig {
    pub fn bmuf(&self) -> Result<BmufConfig> {
        match self.eta {
            Some(eta) => BmufConfig::with_eta(self.workers, self.block_size, self.c, eta),
            None => BmufConfig::from_c(self.workers, self.block_size, self.c),
        }
    }

    /// Worker configuration with `tau` already resolved to its effective value.
    pub fn worker_config(&self, seed: u64, tau: f32, cost: &CostModel) -> Result<WorkerConfig> {
        let cfg = WorkerConfig {
            workers: self.workers,
            algo: self.algo,
            seed,
            batch_size: self.batch_size,
            momentum: self.momentum,
            gtc: GtcConfig { tau, warmup_steps: self.warmup_steps },
            bmuf: self.bmuf()?,
            cost: cost.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: CorpusConfig,
    pub pipeline: PipelineConfig,
    pub teacher: TeacherConfig,
    pub schedule: ScheduleConfig,
    pub trainer: TrainerConfig,
    pub cost: CostModel,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("pbam-out"),
            corpus: CorpusConfig::default(),
            pipeline: PipelineConfig::default(),
            teacher: TeacherConfig::default(),
            schedule: ScheduleConfig::default(),
            trainer: TrainerConfig::default(),
            cost: CostModel::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.pipeline.validate()?;
        self.schedule.validate()?;
        self.cost.validate()?;
        if self.trainer.workers == 0 || self.trainer.batch_size == 0 {
            return Err(Error::InvalidConfig("trainer needs workers >= 1 and batch_size >= 1".into()));
        }
        if self.trainer.hidden.contains(&0) || self.teacher.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer widths must be positive".into()));
        }
        GtcConfig::new(self.trainer.tau)?;
        if self.trainer.algo == Algorithm::Bmuf {
            self.trainer.bmuf()?;
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out.join("runs")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir().join(format!("{}-w{}", self.trainer.algo, self.trainer.workers))
    }
}
