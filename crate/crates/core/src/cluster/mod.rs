//! In-process data-parallel training simulator.
//!
//! Workers compute in parallel on a rayon pool. All cross-worker reductions
//! run in rank order at explicit sync points, so results do not depend on
//! thread count or scheduling.

pub mod cost;
pub mod ledger;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bmuf::{bmuf_train_block, bmuf_update, model_average, BmufConfig, BmufState, LocalWorker, VecBatches};
use crate::datapipe::pipeline::LabeledFeatures;
use crate::datapipe::shard_file::read_shard;
use crate::datapipe::shuffle::fisher_yates;
use crate::datapipe::topk::DEFAULT_FILL;
use crate::datapipe::Shard;
use crate::error::{Error, Result};
use crate::gtc::{gtc_sync_step, GtcConfig, GtcWorker};
use crate::model::{sgd_step, softmax, GradientVector, Matrix, MiniBatch, MomentumBuffer, ReferenceModel, Targets};
use crate::schedule::{EventKind, SchedulePlan};
use cost::{estimate_speedup, modeled_times, CostModel};
use ledger::{bmuf_exchange, dense_allreduce_exchange, CommLedger, SyncKind};

/// Odd constant mixed into per-rank seeds.
pub const RANK_SEED_MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;

/// Environment variable capping the worker thread pool.
pub const THREADS_ENV: &str = "PBAM_THREADS";

pub fn worker_seed(seed: u64, rank: usize) -> u64 {
    seed ^ (rank as u64 + 1).wrapping_mul(RANK_SEED_MULTIPLIER)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Plain,
    Gtc,
    Bmuf,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Plain => "plain",
            Algorithm::Gtc => "gtc",
            Algorithm::Bmuf => "bmuf",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Algorithm::Plain),
            "gtc" => Ok(Algorithm::Gtc),
            "bmuf" => Ok(Algorithm::Bmuf),
            other => Err(Error::InvalidConfig(format!("unknown algorithm {other:?}; expected plain, gtc or bmuf"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    pub workers: usize,
    pub algo: Algorithm,
    pub seed: u64,
    pub batch_size: usize,
    pub momentum: f32,
    pub gtc: GtcConfig,
    pub bmuf: BmufConfig,
    pub cost: CostModel,
}

impl WorkerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::InvalidConfig("need at least one worker".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        match self.algo {
            Algorithm::Gtc => self.gtc.validate()?,
            Algorithm::Bmuf => {
                self.bmuf.validated()?;
                if self.bmuf.workers != self.workers {
                    return Err(Error::InvalidConfig(format!(
                        "BMUF config built for {} workers, run has {}",
                        self.bmuf.workers, self.workers
                    )));
                }
            }
            Algorithm::Plain => {}
        }
        self.cost.validate()
    }
}

/// Round-robin: worker `r` gets shards `r, r + N, r + 2N, ...` in order.
pub fn assign_shards<T: Clone>(shards: &[T], workers: usize) -> Result<Vec<Vec<T>>> {
    if workers == 0 {
        return Err(Error::InvalidConfig("need at least one worker".into()));
    }
    if shards.len() < workers {
        return Err(Error::InvalidInput(format!(
            "{} shards cannot feed {workers} workers; add partitions or reduce workers",
            shards.len()
        )));
    }
    let mut out = vec![Vec::new(); workers];
    for (i, s) in shards.iter().enumerate() {
        out[i % workers].push(s.clone());
    }
    Ok(out)
}

/// A partition held in memory or on disk.
#[derive(Debug, Clone)]
pub enum ShardRef {
    Memory(Arc<Shard>),
    File(PathBuf),
}

impl ShardRef {
    /// Loads the shard, retrying once after an I/O failure.
    pub fn load(&self) -> Result<Arc<Shard>> {
        match self {
            ShardRef::Memory(s) => Ok(Arc::clone(s)),
            ShardRef::File(p) => match read_shard(p) {
                Err(Error::Io { path, source }) => {
                    log::warn!("reading {path} failed ({source}); retrying once");
                    read_shard(p).map(Arc::new)
                }
                other => other.map(Arc::new),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub frames: Matrix,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    /// Partitions carrying top-k teacher targets.
    pub unlabeled: Vec<ShardRef>,
    /// Hard-labeled frames at each stacking offset.
    pub labeled: Option<LabeledFeatures>,
    pub eval: EvalSet,
    /// Logit placed at classes missing from the stored top-k.
    pub fill: f32,
}

impl TrainingData {
    pub fn new(unlabeled: Vec<ShardRef>, labeled: Option<LabeledFeatures>, eval: EvalSet) -> Self {
        Self { unlabeled, labeled, eval, fill: DEFAULT_FILL }
    }
}

/// One line of the metrics log, written after every schedule event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Mini-batch steps per worker so far.
    pub step: u64,
    pub event: usize,
    pub sub_epoch: usize,
    pub phase: String,
    pub algo: Algorithm,
    #[serde(rename = "N")]
    pub workers: usize,
    pub accuracy: f64,
    pub bytes_total: u64,
    pub syncs: u64,
    /// Modeled N-worker time so far under the cost model.
    pub wall_seconds: f64,
    pub predicted_speedup: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ReferenceModel,
    pub ledger: CommLedger,
    pub metrics: Vec<MetricRecord>,
    /// Mini-batch steps per worker.
    pub steps: u64,
    /// Mini-batches over all workers.
    pub minibatches: u64,
}

impl TrainOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.accuracy)
    }
}

/// Runs `f` on a pool capped by `PBAM_THREADS` when set.
pub fn with_thread_cap<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("cannot build a {n}-thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

enum Labels {
    Soft(Vec<f32>),
    Hard(Vec<u32>),
}

struct WorkerData {
    frames: Vec<f32>,
    labels: Labels,
}

impl WorkerData {
    fn rows(&self, dim: usize) -> usize {
        if dim == 0 {
            0
        } else {
            self.frames.len() / dim
        }
    }

    fn batches(&self, dim: usize, classes: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<MiniBatch>> {
        let mut order: Vec<usize> = (0..self.rows(dim)).collect();
        fisher_yates(&mut order, rng);
        order
            .chunks(batch)
            .map(|idx| {
                let mut x = Vec::with_capacity(idx.len() * dim);
                for &i in idx {
                    x.extend_from_slice(&self.frames[i * dim..(i + 1) * dim]);
                }
                let frames = Matrix::new(idx.len(), dim, x)?;
                let targets = match &self.labels {
                    Labels::Hard(l) => Targets::Hard(idx.iter().map(|&i| l[i]).collect()),
                    Labels::Soft(p) => {
                        let mut t = Vec::with_capacity(idx.len() * classes);
                        for &i in idx {
                            t.extend_from_slice(&p[i * classes..(i + 1) * classes]);
                        }
                        Targets::Soft(Matrix::new(idx.len(), classes, t)?)
                    }
                };
                MiniBatch::new(frames, targets, classes)
            })
            .collect()
    }
}

fn load_unlabeled(parts: &[ShardRef], dim: usize, classes: usize, fill: f32) -> Result<WorkerData> {
    let mut frames = Vec::new();
    let mut soft = Vec::new();
    for p in parts {
        let shard = p.load()?;
        for r in &shard.records {
            if r.frames.rows() == 0 {
                continue;
            }
            if r.frames.cols() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "shard {} utterance {}: {} dims, model expects {dim}",
                    shard.name,
                    r.utterance_id,
                    r.frames.cols()
                )));
            }
            let t = r.targets.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("shard {} utterance {} has no teacher targets", shard.name, r.utterance_id))
            })?;
            frames.extend_from_slice(r.frames.as_slice());
            let dense = t.reconstruct(classes, fill)?;
            for row in dense.chunks(classes) {
                soft.extend(softmax(row));
            }
        }
    }
    Ok(WorkerData { frames, labels: Labels::Soft(soft) })
}

/// The first `batch` training frames in stored order: unlabeled partition 0
/// when present, else labeled offset 0.
pub fn probe_batch(data: &TrainingData, dim: usize, classes: usize, batch: usize) -> Result<MiniBatch> {
    let d = match (data.unlabeled.first(), &data.labeled) {
        (Some(first), _) => load_unlabeled(std::slice::from_ref(first), dim, classes, data.fill)?,
        (None, Some(l)) => split_labeled(l, 0, 1).remove(0),
        (None, None) => return Err(Error::InvalidInput("no training data to probe".into())),
    };
    let rows = d.rows(dim).min(batch);
    if rows == 0 {
        return Err(Error::InvalidInput("first training partition is empty".into()));
    }
    let frames = Matrix::new(rows, dim, d.frames[..rows * dim].to_vec())?;
    let targets = match d.labels {
        Labels::Hard(l) => Targets::Hard(l[..rows].to_vec()),
        Labels::Soft(p) => Targets::Soft(Matrix::new(rows, classes, p[..rows * classes].to_vec())?),
    };
    MiniBatch::new(frames, targets, classes)
}

fn split_labeled(features: &LabeledFeatures, offset: usize, workers: usize) -> Vec<WorkerData> {
    let (m, labels) = features.at_offset(offset);
    let rows = m.rows();
    let dim = m.cols();
    (0..workers)
        .map(|r| {
            let (a, b) = (r * rows / workers, (r + 1) * rows / workers);
            WorkerData {
                frames: m.as_slice()[a * dim..b * dim].to_vec(),
                labels: Labels::Hard(labels[a..b].to_vec()),
            }
        })
        .collect()
}

/// Rank-order mean of per-worker gradients, accumulated in `f64`.
fn mean_gradient(grads: &[GradientVector]) -> GradientVector {
    if grads.len() == 1 {
        return grads[0].clone();
    }
    let mut acc = vec![0.0f64; grads[0].len()];
    for g in grads {
        for (a, &v) in acc.iter_mut().zip(&g.values) {
            *a += v as f64;
        }
    }
    let n = grads.len() as f64;
    GradientVector::from(acc.into_iter().map(|v| (v / n) as f32).collect::<Vec<_>>())
}

/// Rank-order sum of per-worker gradients, accumulated in `f64`.
fn sum_gradient(grads: &[GradientVector]) -> GradientVector {
    let mut acc = vec![0.0f64; grads[0].len()];
    for g in grads {
        for (a, &v) in acc.iter_mut().zip(&g.values) {
            *a += v as f64;
        }
    }
    GradientVector::from(acc.into_iter().map(|v| v as f32).collect::<Vec<_>>())
}

enum Engine {
    Plain {
        model: ReferenceModel,
        momentum: MomentumBuffer,
    },
    Gtc {
        topology: crate::model::Topology,
        workers: Vec<GtcWorker>,
        step: u64,
    },
    Bmuf {
        state: BmufState,
        locals: Vec<LocalWorker>,
        /// Local steps taken in the current, unsynchronized block. Blocks
        /// run across event boundaries.
        pending: usize,
    },
}

impl Engine {
    fn new(cfg: &WorkerConfig, init: ReferenceModel) -> Self {
        match cfg.algo {
            Algorithm::Plain => {
                let n = init.params().len();
                Engine::Plain { model: init, momentum: MomentumBuffer::zeros(n) }
            }
            Algorithm::Gtc => Engine::Gtc {
                topology: init.topology().clone(),
                workers: (0..cfg.workers).map(|_| GtcWorker::new(init.params().clone())).collect(),
                step: 0,
            },
            Algorithm::Bmuf => Engine::Bmuf {
                state: BmufState::new(init.params().clone()),
                locals: (0..cfg.workers).map(|_| LocalWorker::new(init.clone())).collect(),
                pending: 0,
            },
        }
    }

    fn current(&self) -> Result<ReferenceModel> {
        match self {
            Engine::Plain { model, .. } => Ok(model.clone()),
            Engine::Gtc { topology, workers, .. } => ReferenceModel::from_parts(topology.clone(), workers[0].model.clone()),
            Engine::Bmuf { state, locals, .. } => {
                ReferenceModel::from_parts(locals[0].model.topology().clone(), state.global().clone())
            }
        }
    }

    /// Runs one event's batches. Every worker holds exactly `steps` batches.
    fn run(&mut self, cfg: &WorkerConfig, batches: Vec<Vec<MiniBatch>>, lr: f32, ledger: &mut CommLedger) -> Result<()> {
        let n = cfg.workers;
        let steps = batches.first().map_or(0, Vec::len);
        match self {
            Engine::Plain { model, momentum } => {
                let params = model.params().len() as u64;
                for s in 0..steps {
                    let grads: Vec<GradientVector> = batches
                        .par_iter()
                        .map(|b| model.loss_and_gradient(&b[s]).map(|(_, g)| g))
                        .collect::<Result<_>>()?;
                    let g = mean_gradient(&grads);
                    if n > 1 {
                        ledger.record(SyncKind::Dense, params * n as u64, &dense_allreduce_exchange(params, n))?;
                    }
                    sgd_step(model.params_mut(), &g, lr, cfg.momentum, momentum)?;
                }
            }
            Engine::Gtc { topology, workers, step } => {
                let params = workers[0].model.len() as u64;
                for s in 0..steps {
                    let grads: Vec<GradientVector> = workers
                        .par_iter()
                        .zip(batches.par_iter())
                        .map(|(w, b)| {
                            let m = ReferenceModel::from_parts(topology.clone(), w.model.clone())?;
                            m.loss_and_gradient(&b[s]).map(|(_, g)| g)
                        })
                        .collect::<Result<_>>()?;
                    if *step < cfg.gtc.warmup_steps {
                        let g = sum_gradient(&grads);
                        for w in workers.iter_mut() {
                            sgd_step(&mut w.model, &g, lr, cfg.momentum, &mut w.momentum)?;
                        }
                        if n > 1 {
                            ledger.record(SyncKind::Dense, params * n as u64, &dense_allreduce_exchange(params, n))?;
                        }
                    } else {
                        gtc_sync_step(workers, &grads, lr, cfg.momentum, &cfg.gtc, ledger)?;
                    }
                    *step += 1;
                }
            }
            Engine::Bmuf { state, locals, pending } => {
                let mut sources: Vec<VecBatches> = batches.into_iter().map(VecBatches::new).collect();
                let block = cfg.bmuf.block_size;
                loop {
                    let want = block - *pending;
                    let done = bmuf_train_block(locals, &mut sources, want, lr, cfg.momentum)?;
                    *pending += done;
                    if *pending == block {
                        bmuf_sync(state, locals, cfg, ledger)?;
                        *pending = 0;
                    }
                    if done < want {
                        break;
                    }
                }
            }
        }
        Ok(())
    }
}

fn bmuf_sync(state: &mut BmufState, locals: &mut [LocalWorker], cfg: &WorkerConfig, ledger: &mut CommLedger) -> Result<()> {
    let n = locals.len();
    let params = state.global().len() as u64;
    let models: Vec<_> = locals.iter().map(|w| w.model.params().clone()).collect();
    let avg = model_average(&models)?;
    let global = bmuf_update(state, &avg, &cfg.bmuf)?.clone();
    ledger.record(SyncKind::Bmuf, params * n as u64, &bmuf_exchange(params, n))?;
    for w in locals.iter_mut() {
        w.restart_from(&global)?;
    }
    Ok(())
}

impl Engine {
    /// Synchronizes a trailing partial BMUF block.
    fn finish(&mut self, cfg: &WorkerConfig, ledger: &mut CommLedger) -> Result<()> {
        if let Engine::Bmuf { state, locals, pending } = self {
            if *pending > 0 {
                bmuf_sync(state, locals, cfg, ledger)?;
                *pending = 0;
            }
        }
        Ok(())
    }
}

/// Trains `init` through every event of `plan` with the configured algorithm.
pub fn run_training(cfg: &WorkerConfig, plan: &SchedulePlan, data: &TrainingData, init: ReferenceModel) -> Result<TrainOutcome> {
    cfg.validate()?;
    with_thread_cap(|| train_inner(cfg, plan, data, init))?
}

fn train_inner(cfg: &WorkerConfig, plan: &SchedulePlan, data: &TrainingData, init: ReferenceModel) -> Result<TrainOutcome> {
    let n = cfg.workers;
    let dim = init.topology().input_dim;
    let classes = init.topology().num_classes;
    if data.eval.frames.rows() > 0 && data.eval.frames.cols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "evaluation frames have {} dims, model expects {dim}",
            data.eval.frames.cols()
        )));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|r| ChaCha8Rng::seed_from_u64(worker_seed(cfg.seed, r))).collect();
    let mut engine = Engine::new(cfg, init);
    let mut ledger = CommLedger::new(n);
    let mut metrics = Vec::with_capacity(plan.events.len());
    let mut steps_total = 0u64;

    for event in &plan.events {
        let worker_data: Vec<WorkerData> = match event.kind {
            EventKind::Unlabeled { start, end } => {
                let parts = data.unlabeled.get(start..end).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "schedule wants partitions {start}..{end}, only {} available",
                        data.unlabeled.len()
                    ))
                })?;
                assign_shards(parts, n)?
                    .par_iter()
                    .map(|mine| load_unlabeled(mine, dim, classes, data.fill))
                    .collect::<Result<_>>()?
            }
            EventKind::Labeled { offset } => {
                let labeled = data
                    .labeled
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("schedule has a labeled pass but no labeled data".into()))?;
                if labeled.at_offset(offset).0.cols() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "labeled frames have {} dims, model expects {dim}",
                        labeled.at_offset(offset).0.cols()
                    )));
                }
                split_labeled(labeled, offset, n)
            }
        };
        let mut batches: Vec<Vec<MiniBatch>> = worker_data
            .par_iter()
            .zip(rngs.par_iter_mut())
            .map(|(d, rng)| d.batches(dim, classes, cfg.batch_size, rng))
            .collect::<Result<_>>()?;
        let steps = batches.iter().map(Vec::len).min().unwrap_or(0);
        for b in &mut batches {
            b.truncate(steps);
        }
        engine.run(cfg, batches, event.lr as f32, &mut ledger)?;
        if event.index + 1 == plan.events.len() {
            engine.finish(cfg, &mut ledger)?;
        }
        steps_total += steps as u64;

        let model = engine.current()?;
        let accuracy = model.accuracy(&data.eval.frames, &data.eval.labels)?;
        let minibatches = steps_total * n as u64;
        let (_, tn) = modeled_times(&ledger, &cfg.cost, n, minibatches);
        let phase = match event.kind {
            EventKind::Unlabeled { .. } => "unlabeled",
            EventKind::Labeled { .. } => "labeled",
        };
        log::info!(
            "{} N={n} event {} ({phase}, sub-epoch {}): {steps} steps, accuracy {accuracy:.4}",
            cfg.algo,
            event.index,
            event.sub_epoch
        );
        metrics.push(MetricRecord {
            step: steps_total,
            event: event.index,
            sub_epoch: event.sub_epoch,
            phase: phase.to_string(),
            algo: cfg.algo,
            workers: n,
            accuracy,
            bytes_total: ledger.bytes_total(),
            syncs: ledger.sync_count(),
            wall_seconds: tn,
            predicted_speedup: estimate_speedup(&ledger, &cfg.cost, n, minibatches),
        });
    }
    Ok(TrainOutcome {
        model: engine.current()?,
        ledger,
        metrics,
        steps: steps_total,
        minibatches: steps_total * n as u64,
    })
}
