//! Gradient threshold compression.
//!
//! Each worker adds its residual to the fresh gradient and sends only the
//! coordinates whose magnitude exceeds `tau`, quantized to `±tau`. One sent
//! coordinate is one 32-bit word: bit 31 carries the sign (set means `-tau`)
//! and bits 0..=30 the coordinate index. Everything not sent stays in the
//! worker's residual for later steps.
//!
//! Conservation (`decode(update) + residual == input`) is exact whenever
//! `v - tau` is representable, which holds for every `|v| < 2^24 * tau`
//! when `tau` is a power of two.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ledger::{gtc_exchange, CommLedger, SyncKind};
use crate::error::{Error, Result};
use crate::model::{sgd_step, GradientVector, MomentumBuffer, ParameterVector};

pub const SIGN_BIT: u32 = 0x8000_0000;
pub const INDEX_MASK: u32 = 0x7fff_ffff;
/// Exclusive upper bound on the dense dimension a [`SparseUpdate`] can address.
pub const MAX_DIM: u64 = 1 << 31;
pub const WIRE_MAGIC: &[u8; 4] = b"GTCU";
/// Default threshold.
pub const DEFAULT_TAU: f32 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtcConfig {
    pub tau: f32,
    /// Dense synchronous steps run before compression starts.
    #[serde(default)]
    pub warmup_steps: u64,
}

impl GtcConfig {
    pub fn new(tau: f32) -> Result<Self> {
        let cfg = Self { tau, warmup_steps: 0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidConfig(format!("tau must be positive and finite, got {}", self.tau)));
        }
        Ok(())
    }
}

impl Default for GtcConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            warmup_steps: 0,
        }
    }
}

/// `tau` times the power of two nearest the RMS of `grads`. Scaling by a
/// power of two keeps a power-of-two threshold exactly representable.
pub fn gradient_scaled_tau(tau: f32, grads: &[GradientVector]) -> Result<f32> {
    let (mut sumsq, mut n) = (0.0f64, 0usize);
    for g in grads {
        sumsq += g.values.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
        n += g.len();
    }
    let rms = (sumsq / n.max(1) as f64).sqrt();
    if !(rms > 0.0) || !rms.is_finite() {
        return Err(Error::InvalidInput(format!("cannot scale tau by a gradient RMS of {rms}")));
    }
    let scaled = tau * 2f32.powi(rms.log2().round() as i32);
    GtcConfig::new(scaled)?;
    Ok(scaled)
}

pub fn pack_word(index: u64, negative: bool) -> Result<u32> {
    if index >= MAX_DIM {
        return Err(Error::UnsupportedDimension(index));
    }
    Ok(index as u32 | if negative { SIGN_BIT } else { 0 })
}

/// `(index, negative)`.
pub fn unpack_word(word: u32) -> (u32, bool) {
    (word & INDEX_MASK, word & SIGN_BIT != 0)
}

/// A compressed gradient in canonical form (strictly increasing indices).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    tau: f32,
    dim: u64,
    words: Vec<u32>,
}

impl SparseUpdate {
    pub fn new(tau: f32, dim: u64, words: Vec<u32>) -> Result<Self> {
        if dim > MAX_DIM {
            return Err(Error::UnsupportedDimension(dim));
        }
        let mut prev: Option<u32> = None;
        for (pos, &w) in words.iter().enumerate() {
            let (idx, _) = unpack_word(w);
            if idx as u64 >= dim {
                return Err(Error::CorruptUpdate(format!("word {pos} addresses index {idx} >= dim {dim}")));
            }
            if prev.is_some_and(|p| idx <= p) {
                return Err(Error::CorruptUpdate(format!("word {pos} index {idx} is not increasing")));
            }
            prev = Some(idx);
        }
        Ok(Self { tau, dim, words })
    }

    pub fn empty(tau: f32, dim: u64) -> Self {
        Self {
            tau,
            dim,
            words: Vec::new(),
        }
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn dim(&self) -> u64 {
        self.dim
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// Little-endian: magic, dim u64, tau f32, word count u32, words.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.words.len());
        out.extend_from_slice(WIRE_MAGIC);
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.tau.to_le_bytes());
        out.extend_from_slice(&(self.words.len() as u32).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |why: &str| Error::CorruptUpdate(why.to_string());
        if bytes.len() < 20 || &bytes[..4] != WIRE_MAGIC {
            return Err(corrupt("missing GTCU header"));
        }
        let dim = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let tau = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        if bytes.len() != 20 + 4 * count {
            return Err(corrupt(&format!(
                "header announces {count} words, payload holds {} bytes",
                bytes.len() - 20
            )));
        }
        let words = bytes[20..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(tau, dim, words)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Unsent gradient mass owned by one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBuffer(pub Vec<f32>);

impl ResidualBuffer {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Threshold `grad_plus_residual` at `tau` (strictly greater-than).
pub fn gtc_encode(grad_plus_residual: &GradientVector, cfg: &GtcConfig) -> Result<(SparseUpdate, ResidualBuffer)> {
    cfg.validate()?;
    let dim = grad_plus_residual.len() as u64;
    if dim > MAX_DIM {
        return Err(Error::UnsupportedDimension(dim));
    }
    if let Some(i) = grad_plus_residual.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient coordinate {i} is {}", grad_plus_residual.values[i])));
    }
    let tau = cfg.tau;
    let mut words = Vec::new();
    let mut residual = Vec::with_capacity(grad_plus_residual.len());
    for (i, &v) in grad_plus_residual.values.iter().enumerate() {
        if v.abs() > tau {
            let negative = v < 0.0;
            words.push(i as u32 | if negative { SIGN_BIT } else { 0 });
            residual.push(if negative { v + tau } else { v - tau });
        } else {
            residual.push(v);
        }
    }
    Ok((SparseUpdate { tau, dim, words }, ResidualBuffer(residual)))
}

pub fn gtc_decode(update: &SparseUpdate) -> Result<GradientVector> {
    // Re-validate: updates may arrive from the wire.
    let update = SparseUpdate::new(update.tau, update.dim, update.words.clone())?;
    let mut dense = vec![0.0f32; update.dim as usize];
    for &w in &update.words {
        let (idx, negative) = unpack_word(w);
        dense[idx as usize] = if negative { -update.tau } else { update.tau };
    }
    Ok(GradientVector::from(dense))
}

/// Dense sum of all updates, accumulated in rank order in `f64`.
pub fn gtc_aggregate(updates: &[SparseUpdate]) -> Result<GradientVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Protocol("no updates to aggregate".to_string()))?;
    let mut acc = vec![0.0f64; first.dim as usize];
    for (rank, u) in updates.iter().enumerate() {
        if u.dim != first.dim || u.tau.to_bits() != first.tau.to_bits() {
            return Err(Error::Protocol(format!(
                "rank {rank} sent dim {} tau {}, rank 0 sent dim {} tau {}",
                u.dim, u.tau, first.dim, first.tau
            )));
        }
        let tau = u.tau as f64;
        for &w in &u.words {
            let (idx, negative) = unpack_word(w);
            let slot = acc
                .get_mut(idx as usize)
                .ok_or_else(|| Error::CorruptUpdate(format!("rank {rank} index {idx} >= dim {}", u.dim)))?;
            *slot += if negative { -tau } else { tau };
        }
    }
    Ok(GradientVector::from(acc.into_iter().map(|v| v as f32).collect::<Vec<_>>()))
}

/// Per-worker state touched by a synchronous GTC step.
#[derive(Debug, Clone)]
pub struct GtcWorker {
    pub model: ParameterVector,
    pub momentum: MomentumBuffer,
    pub residual: ResidualBuffer,
}

impl GtcWorker {
    pub fn new(model: ParameterVector) -> Self {
        let n = model.len();
        Self {
            model,
            momentum: MomentumBuffer::zeros(n),
            residual: ResidualBuffer::zeros(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtcStepReport {
    pub words_per_worker: Vec<u64>,
    pub aggregate: GradientVector,
}

/// One synchronous step: every worker encodes `gradient + residual`, the
/// updates are exchanged all-to-all, and every worker applies the same
/// aggregate with [`sgd_step`]. Nothing is committed unless every worker
/// succeeds.
pub fn gtc_sync_step(
    workers: &mut [GtcWorker],
    local_grads: &[GradientVector],
    lr: f32,
    momentum: f32,
    cfg: &GtcConfig,
    ledger: &mut CommLedger,
) -> Result<GtcStepReport> {
    if workers.len() != local_grads.len() || workers.is_empty() {
        return Err(Error::Protocol(format!(
            "{} workers reached the barrier with {} gradients",
            workers.len(),
            local_grads.len()
        )));
    }
    let dim = workers[0].model.len();
    let mut encoded = Vec::with_capacity(workers.len());
    for (rank, (w, g)) in workers.iter().zip(local_grads).enumerate() {
        if g.len() != dim || w.residual.len() != dim || w.model.len() != dim {
            return Err(Error::Protocol(format!("rank {rank} has mismatched vector lengths")));
        }
        let combined: Vec<f32> = g.values.iter().zip(&w.residual.0).map(|(a, b)| a + b).collect();
        let (update, residual) = gtc_encode(&GradientVector::from(combined), cfg)
            .map_err(|e| Error::Protocol(format!("rank {rank} failed to encode: {e}")))?;
        encoded.push((update, residual));
    }
    let updates: Vec<SparseUpdate> = encoded.iter().map(|(u, _)| u.clone()).collect();
    let aggregate = gtc_aggregate(&updates)?;

    let mut next = Vec::with_capacity(workers.len());
    for w in workers.iter() {
        let mut model = w.model.clone();
        let mut buf = w.momentum.clone();
        sgd_step(&mut model, &aggregate, lr, momentum, &mut buf)?;
        next.push((model, buf));
    }
    if next.iter().any(|(m, _)| !m.bitwise_eq(&next[0].0)) {
        return Err(Error::Protocol("worker models diverged after GTC sync".to_string()));
    }

    let words_per_worker: Vec<u64> = updates.iter().map(|u| u.word_count() as u64).collect();
    ledger.record(SyncKind::Gtc, words_per_worker.iter().sum(), &gtc_exchange(&words_per_worker))?;
    for (w, ((model, buf), (_, residual))) in workers.iter_mut().zip(next.into_iter().zip(encoded)) {
        w.model = model;
        w.momentum = buf;
        w.residual = residual;
    }
    Ok(GtcStepReport {
        words_per_worker,
        aggregate,
    })
}
