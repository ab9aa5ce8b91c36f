//! Blockwise model update filtering with Nesterov block momentum.
//!
//! Workers train independently for `block_size` mini-batches, then the
//! global model is refreshed from their average:
//!
//! ```text
//! avg     = mean_i W_i
//! G       = avg - W_g
//! Delta   = eta * Delta + zeta * G
//! W_g    += Delta + eta * Delta
//! ```
//!
//! and every worker restarts from the new `W_g`. `eta` and `zeta` are tied
//! together by `zeta = C * N * (1 - eta)`.

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sgd_step, MiniBatch, MomentumBuffer, ParameterVector, ReferenceModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BmufConfig {
    pub block_size: usize,
    /// Block momentum.
    pub eta: f64,
    /// Block learning rate.
    pub zeta: f64,
    pub c: f64,
    pub workers: usize,
}

/// `zeta = C * N * (1 - eta)`.
pub fn derive_zeta(c: f64, workers: usize, eta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::InvalidConfig(format!("block momentum {eta} must lie in [0, 1)")));
    }
    if workers == 0 {
        return Err(Error::InvalidConfig("BMUF needs at least one worker".to_string()));
    }
    if !(c >= 1.0) || !c.is_finite() {
        return Err(Error::InvalidConfig(format!("C = {c} must be >= 1")));
    }
    Ok(c * workers as f64 * (1.0 - eta))
}

impl BmufConfig {
    /// Explicit `eta`; `zeta` follows from `C`.
    pub fn with_eta(workers: usize, block_size: usize, c: f64, eta: f64) -> Result<Self> {
        let zeta = derive_zeta(c, workers, eta)?;
        Self {
            block_size,
            eta,
            zeta,
            c,
            workers,
        }
        .validated()
    }

    /// `zeta = 1` and `eta = 1 - 1 / (C * N)`, so that `C` is honored exactly.
    pub fn from_c(workers: usize, block_size: usize, c: f64) -> Result<Self> {
        if workers == 0 || !(c >= 1.0) || !c.is_finite() {
            return Err(Error::InvalidConfig(format!("need N >= 1 and C >= 1, got N={workers} C={c}")));
        }
        let eta = 1.0 - 1.0 / (c * workers as f64);
        Self {
            block_size,
            eta,
            zeta: 1.0,
            c,
            workers,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block size must be at least 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.eta) || !(self.zeta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= eta < 1 and zeta > 0, got eta={} zeta={}",
                self.eta, self.zeta
            )));
        }
        if (self.zeta - self.c * self.workers as f64 * (1.0 - self.eta)).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "zeta {} inconsistent with C={} N={} eta={}",
                self.zeta, self.c, self.workers, self.eta
            )));
        }
        Ok(self)
    }
}

/// Element-wise mean, accumulated in rank order in `f64`.
pub fn model_average(models: &[ParameterVector]) -> Result<ParameterVector> {
    let first = models
        .first()
        .ok_or_else(|| Error::Protocol("cannot average zero models".to_string()))?;
    let mut acc = vec![0.0f64; first.len()];
    for (rank, m) in models.iter().enumerate() {
        if m.len() != first.len() {
            return Err(Error::Protocol(format!(
                "rank {rank} holds {} parameters, rank 0 holds {}",
                m.len(),
                first.len()
            )));
        }
        for (a, &v) in acc.iter_mut().zip(m.values()) {
            *a += v as f64;
        }
    }
    let n = models.len() as f64;
    first.with_values(acc.into_iter().map(|v| (v / n) as f32).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BmufState {
    global: ParameterVector,
    delta: Vec<f32>,
    block: u64,
}

impl BmufState {
    pub fn new(initial: ParameterVector) -> Self {
        let n = initial.len();
        Self {
            global: initial,
            delta: vec![0.0; n],
            block: 0,
        }
    }

    pub fn global(&self) -> &ParameterVector {
        &self.global
    }

    pub fn delta(&self) -> &[f32] {
        &self.delta
    }

    /// Completed BMUF steps.
    pub fn block(&self) -> u64 {
        self.block
    }
}

/// One BMUF step from the worker average. Returns the model to broadcast.
pub fn bmuf_update<'a>(state: &'a mut BmufState, average: &ParameterVector, cfg: &BmufConfig) -> Result<&'a ParameterVector> {
    if average.len() != state.global.len() {
        return Err(Error::Protocol(format!(
            "average has {} parameters, global model {}",
            average.len(),
            state.global.len()
        )));
    }
    let (eta, zeta) = (cfg.eta, cfg.zeta);
    let mut next = Vec::with_capacity(state.global.len());
    let mut delta = Vec::with_capacity(state.delta.len());
    for ((&wg, &avg), &d_prev) in state.global.values().iter().zip(average.values()).zip(&state.delta) {
        let g = avg as f64 - wg as f64;
        let d = eta * d_prev as f64 + zeta * g;
        if !d.is_finite() {
            return Err(Error::NonFinite(format!(
                "block momentum became {d} at block {}; aborting",
                state.block + 1
            )));
        }
        next.push((wg as f64 + d + eta * d) as f32);
        delta.push(d as f32);
    }
    state.global = state.global.with_values(next)?;
    state.delta = delta;
    state.block += 1;
    Ok(&state.global)
}

/// A worker's local replica during intra-block training.
#[derive(Debug, Clone)]
pub struct LocalWorker {
    pub model: ReferenceModel,
    pub momentum: MomentumBuffer,
}

impl LocalWorker {
    pub fn new(model: ReferenceModel) -> Self {
        let n = model.params().len();
        Self {
            model,
            momentum: MomentumBuffer::zeros(n),
        }
    }

    /// Restart from the broadcast global model.
    pub fn restart_from(&mut self, global: &ParameterVector) -> Result<()> {
        self.model.set_params(global.clone())?;
        self.momentum.reset();
        Ok(())
    }
}

/// A worker's queue of mini-batches.
pub trait BatchSource: Send {
    fn remaining(&self) -> usize;
    fn next_batch(&mut self) -> Option<MiniBatch>;
}

/// Batches held in memory, consumed front to back.
#[derive(Debug, Clone, Default)]
pub struct VecBatches {
    batches: std::collections::VecDeque<MiniBatch>,
}

impl VecBatches {
    pub fn new(batches: Vec<MiniBatch>) -> Self {
        Self {
            batches: batches.into(),
        }
    }
}

impl BatchSource for VecBatches {
    fn remaining(&self) -> usize {
        self.batches.len()
    }

    fn next_batch(&mut self) -> Option<MiniBatch> {
        self.batches.pop_front()
    }
}

/// Runs up to `block_size` local SGD steps on every worker in parallel with
/// no communication. If any worker has fewer batches left, every worker
/// stops at that count. Returns the number of steps taken.
pub fn bmuf_train_block<S: BatchSource>(
    workers: &mut [LocalWorker],
    sources: &mut [S],
    block_size: usize,
    lr: f32,
    momentum: f32,
) -> Result<usize> {
    if workers.len() != sources.len() {
        return Err(Error::Protocol(format!(
            "{} workers but {} batch sources",
            workers.len(),
            sources.len()
        )));
    }
    let available = sources.iter().map(BatchSource::remaining).min().unwrap_or(0);
    let steps = block_size.min(available);
    if steps < block_size && steps > 0 {
        debug!("block truncated to {steps} of {block_size} mini-batches: a worker ran out of data");
    }
    workers
        .par_iter_mut()
        .zip(sources.par_iter_mut())
        .try_for_each(|(w, src)| -> Result<()> {
            for _ in 0..steps {
                let batch = src
                    .next_batch()
                    .ok_or_else(|| Error::Protocol("batch source ran dry mid-block".to_string()))?;
                let (_, grad) = w.model.loss_and_gradient(&batch)?;
                sgd_step(w.model.params_mut(), &grad, lr, momentum, &mut w.momentum)?;
            }
            Ok(())
        })?;
    Ok(steps)
}
