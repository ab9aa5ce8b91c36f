//! Feature normalization and frame stacking.

use serde::{Deserialize, Serialize};

use super::Shard;
use crate::error::{Error, Result};
use crate::model::Matrix;

pub const STACK: usize = 3;
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Running per-speaker mean, carried across that speaker's utterances.
#[derive(Debug, Clone)]
pub struct CausalMean {
    count: u64,
    sum: Vec<f64>,
}

impl CausalMean {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, sum: vec![0.0; dim] }
    }

    /// Subtracts from every frame the mean of all frames seen so far,
    /// itself included. The first frame of a stream therefore maps to zero.
    pub fn apply(&mut self, frames: &Matrix) -> Result<Matrix> {
        if frames.cols() != self.sum.len() {
            return Err(Error::DimensionMismatch(format!(
                "causal mean over {} dims, frames have {}",
                self.sum.len(),
                frames.cols()
            )));
        }
        let mut out = Vec::with_capacity(frames.as_slice().len());
        for t in 0..frames.rows() {
            self.count += 1;
            let n = self.count as f64;
            for (s, &x) in self.sum.iter_mut().zip(frames.row(t)) {
                *s += x as f64;
                out.push((x as f64 - *s / n) as f32);
            }
        }
        Matrix::new(frames.rows(), frames.cols(), out)
    }
}

/// Causal mean normalization of a single timestamp-ordered stream.
pub fn causal_mean_normalize(frames: &Matrix) -> Matrix {
    CausalMean::new(frames.cols())
        .apply(frames)
        .expect("dimension taken from the input")
}

/// Concatenates frames `offset+3j .. offset+3j+2` into row `j`.
pub fn stack_and_subsample(frames: &Matrix, offset: usize) -> Result<Matrix> {
    if offset >= STACK {
        return Err(Error::InvalidInput(format!("stacking offset {offset} not in 0..{STACK}")));
    }
    let d = frames.cols();
    let rows = frames.rows().saturating_sub(offset) / STACK;
    if rows == 0 {
        log::debug!("stack: {} frames too short for offset {offset}", frames.rows());
    }
    let start = offset * d;
    let data = frames.as_slice()[start..start + rows * STACK * d].to_vec();
    Matrix::new(rows, STACK * d, data)
}

/// Label of the centre frame of every stacked row.
pub fn stack_labels(labels: &[u32], offset: usize) -> Vec<u32> {
    let rows = labels.len().saturating_sub(offset) / STACK;
    (0..rows).map(|j| labels[offset + STACK * j + 1]).collect()
}

/// Zeroth, first and second order statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsAccumulator {
    pub n: u64,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub frames: u64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, sum: vec![0.0; dim], sumsq: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn add(&mut self, frames: &Matrix) -> Result<()> {
        if frames.rows() == 0 {
            return Ok(());
        }
        if frames.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "stats over {} dims, frames have {}",
                self.dim(),
                frames.cols()
            )));
        }
        for t in 0..frames.rows() {
            for ((s, q), &x) in self.sum.iter_mut().zip(&mut self.sumsq).zip(frames.row(t)) {
                let x = x as f64;
                *s += x;
                *q += x * x;
            }
        }
        self.n += frames.rows() as u64;
        Ok(())
    }

    /// Adds `other` into `self`. An accumulator with no frames is neutral
    /// whatever its dimension.
    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        if other.n == 0 {
            return Ok(());
        }
        if self.n == 0 && self.sum.iter().chain(&self.sumsq).all(|&v| v == 0.0) {
            *self = other.clone();
            return Ok(());
        }
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!("merging {}-dim stats into {}-dim", other.dim(), self.dim())));
        }
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
            *a += b;
        }
        Ok(())
    }

    /// Mean and floored population variance.
    pub fn finalize(&self) -> Result<GlobalStats> {
        if self.n == 0 {
            return Err(Error::InvalidInput("cannot finalize statistics over zero frames".into()));
        }
        let n = self.n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let variance = self
            .sumsq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(VARIANCE_FLOOR))
            .collect();
        Ok(GlobalStats { frames: self.n, mean, variance })
    }
}

pub fn accumulate_stats(shard: &Shard) -> Result<StatsAccumulator> {
    let dim = shard.records.first().map_or(0, |r| r.frames.cols());
    let mut acc = StatsAccumulator::new(dim);
    for r in &shard.records {
        acc.add(&r.frames)?;
    }
    Ok(acc)
}

pub fn merge_stats(a: &StatsAccumulator, b: &StatsAccumulator) -> Result<StatsAccumulator> {
    let mut out = a.clone();
    out.merge(b)?;
    Ok(out)
}

/// `(x - mean) / sqrt(variance)` per dimension.
pub fn apply_global_norm(frames: &Matrix, mean: &[f64], variance: &[f64]) -> Result<Matrix> {
    if mean.len() != frames.cols() || variance.len() != frames.cols() {
        return Err(Error::DimensionMismatch(format!(
            "normalizer has {} dims, frames have {}",
            mean.len(),
            frames.cols()
        )));
    }
    if let Some(v) = variance.iter().find(|&&v| !(v >= VARIANCE_FLOOR)) {
        return Err(Error::InvalidInput(format!("variance {v} below floor {VARIANCE_FLOOR}")));
    }
    let inv_sd: Vec<f64> = variance.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut out = Vec::with_capacity(frames.as_slice().len());
    for t in 0..frames.rows() {
        for ((&x, m), s) in frames.row(t).iter().zip(mean).zip(&inv_sd) {
            out.push(((x as f64 - m) * s) as f32);
        }
    }
    Matrix::new(frames.rows(), frames.cols(), out)
}

impl GlobalStats {
    pub fn apply(&self, frames: &Matrix) -> Result<Matrix> {
        apply_global_norm(frames, &self.mean, &self.variance)
    }
}
