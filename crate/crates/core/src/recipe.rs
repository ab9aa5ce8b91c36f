//! End-to-end recipes shared by the command line and the test suites.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bmuf::BmufConfig;
use crate::cluster::cost::CostModel;
use crate::cluster::{run_training, Algorithm, EvalSet, ShardRef, TrainOutcome, TrainingData, WorkerConfig};
use crate::datapipe::corpus::{CorpusConfig, SyntheticCorpus};
use crate::datapipe::features::{GlobalStats, STACK};
use crate::datapipe::pipeline::{featurize_labeled, normalize_shards, render_shards, targets_for_shards, LabeledFeatures, PipelineConfig};
use crate::datapipe::select::select_data;
use crate::datapipe::sharding::{repartition, shard_by_speaker};
use crate::datapipe::Shard;
use crate::error::{Error, Result};
use crate::gtc::GtcConfig;
use crate::model::{ReferenceModel, Topology};
use crate::schedule::{build_schedule, ScheduleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr0: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub momentum: f32,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 12,
            lr0: 0.05,
            decay: 0.8,
            batch_size: 64,
            momentum: 0.9,
        }
    }
}

pub fn eval_set(heldout: &LabeledFeatures) -> EvalSet {
    let (frames, labels) = heldout.pooled();
    EvalSet { frames, labels }
}

pub fn input_dim(corpus: &CorpusConfig) -> usize {
    corpus.raw_dim * STACK
}

/// Plain single-worker configuration for the given batch and momentum.
pub fn single_worker(seed: u64, batch_size: usize, momentum: f32) -> Result<WorkerConfig> {
    Ok(WorkerConfig {
        workers: 1,
        algo: Algorithm::Plain,
        seed,
        batch_size,
        momentum,
        gtc: GtcConfig::default(),
        bmuf: BmufConfig::from_c(1, 1, 1.0)?,
        cost: CostModel::default(),
    })
}

/// Supervised training on the labeled set only, one offset per epoch.
pub fn train_teacher(
    labeled: &LabeledFeatures,
    heldout: &LabeledFeatures,
    classes: usize,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if labeled.is_empty() {
        return Err(Error::InvalidInput("teacher training needs labeled data".into()));
    }
    let dim = labeled.at_offset(0).0.cols();
    let topology = Topology::new(dim, cfg.hidden.clone(), classes)?;
    let schedule = ScheduleConfig {
        sub_epochs: cfg.epochs,
        lr0: cfg.lr0,
        decay: cfg.decay,
        labeled_boost: 1.0,
        interleave_labeled: true,
        finetune_from: cfg.epochs,
    };
    let plan = build_schedule(&schedule, 0, true)?;
    let data = TrainingData::new(Vec::new(), Some(labeled.clone()), eval_set(heldout));
    run_training(
        &single_worker(seed, cfg.batch_size, cfg.momentum)?,
        &plan,
        &data,
        ReferenceModel::init(topology, seed),
    )
}

/// Everything a student run needs, built in memory.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub corpus: SyntheticCorpus,
    pub stats: GlobalStats,
    /// Normalized, shuffled shards without targets.
    pub shards: Vec<Shard>,
    /// Repartitioned shards with teacher targets.
    pub partitions: Vec<Shard>,
    pub labeled: LabeledFeatures,
    pub heldout: LabeledFeatures,
    pub teacher: ReferenceModel,
    pub teacher_accuracy: f64,
}

impl PreparedData {
    pub fn training_data(&self, with_labeled: bool) -> TrainingData {
        TrainingData::new(
            self.partitions.iter().cloned().map(|s| ShardRef::Memory(Arc::new(s))).collect(),
            with_labeled.then(|| self.labeled.clone()),
            eval_set(&self.heldout),
        )
    }

    /// Same data with targets regenerated at a different `k`.
    pub fn with_k(&self, k: usize, pipe: &PipelineConfig) -> Result<PreparedData> {
        let with_targets = targets_for_shards(&self.teacher, &self.shards, k, pipe.target_batch)?;
        Ok(PreparedData { partitions: repartition(with_targets, pipe.partitions)?, ..self.clone() })
    }
}

pub fn prepare_in_memory(
    corpus_cfg: &CorpusConfig,
    pipe: &PipelineConfig,
    teacher_cfg: &TeacherConfig,
    seed: u64,
) -> Result<PreparedData> {
    pipe.validate()?;
    let corpus = SyntheticCorpus::new(corpus_cfg.clone(), seed)?;
    let manifests = corpus.manifests();
    let selected = select_data(&manifests.pool, pipe.select_hours, seed)?;
    let assignments = shard_by_speaker(&selected, pipe.shard_hours)?;
    let raw = render_shards(&corpus, &assignments)?;
    let (shards, stats) = normalize_shards(&raw, seed)?;
    let labeled = featurize_labeled(&corpus, &manifests.labeled, &stats)?;
    let heldout = featurize_labeled(&corpus, &manifests.heldout, &stats)?;
    let teacher_run = train_teacher(&labeled, &heldout, corpus_cfg.classes, teacher_cfg, seed)?;
    let with_targets = targets_for_shards(&teacher_run.model, &shards, pipe.k, pipe.target_batch)?;
    let partitions = repartition(with_targets, pipe.partitions)?;
    Ok(PreparedData {
        corpus,
        stats,
        shards,
        partitions,
        labeled,
        heldout,
        teacher_accuracy: teacher_run.final_accuracy(),
        teacher: teacher_run.model,
    })
}
