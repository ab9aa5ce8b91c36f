//! Feedforward frame classifier, cross-entropy losses and single-worker SGD.
//!
//! The network is a stack of affine layers with `tanh` between them; the
//! last layer emits raw logits. Parameters live in one flat
//! [`ParameterVector`] with one named segment per weight matrix and bias so
//! the distributed trainers can treat the model as a plain array of `f32`.
//!
//! All dot products and batch reductions accumulate in `f64` and round once.
//! The arithmetic is written once over [`Scalar`] so the gradient check can
//! run the identical graph in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Float type the network arithmetic is generic over.
pub trait Scalar: Copy + Send + Sync + PartialOrd + std::fmt::Debug + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// A named slice `[offset, offset + len)` of a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat model weights with a segment layout that tiles the whole array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f32>,
    segments: Vec<Segment>,
}

impl ParameterVector {
    pub fn new(values: Vec<f32>, segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0usize;
        for seg in &segments {
            if seg.offset != cursor {
                return Err(Error::InvalidInput(format!(
                    "segment {} starts at {} but the previous segment ends at {}",
                    seg.name, seg.offset, cursor
                )));
            }
            cursor += seg.len;
        }
        if cursor != values.len() {
            return Err(Error::InvalidInput(format!(
                "segments cover {} values, vector holds {}",
                cursor,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} is {}", values[i])));
        }
        Ok(Self { values, segments })
    }

    /// A single-segment vector named `flat`.
    pub fn from_values(values: Vec<f32>) -> Result<Self> {
        let segments = vec![Segment {
            name: "flat".to_string(),
            offset: 0,
            len: values.len(),
        }];
        Self::new(values, segments)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            segments: self.segments.clone(),
        }
    }

    /// Same layout, new values. Lengths must match.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Self::new(values, self.segments.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&[f32]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    /// Bitwise equality of the values, so `-0.0 != 0.0` and NaN payloads count.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Gradient of a loss with respect to a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f32>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }
}

impl From<Vec<f32>> for GradientVector {
    fn from(values: Vec<f32>) -> Self {
        Self { values }
    }
}

/// Row-major dense matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}

/// Supervision for a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class index per row.
    Hard(Vec<u32>),
    /// Posterior distribution per row.
    Soft(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub frames: Matrix,
    pub targets: Targets,
}

/// Tolerance on the row sums of soft targets.
pub const SOFT_TARGET_TOLERANCE: f64 = 1e-5;

impl MiniBatch {
    pub fn new(frames: Matrix, targets: Targets, num_classes: usize) -> Result<Self> {
        match &targets {
            Targets::Hard(labels) => {
                if labels.len() != frames.rows() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} labels for {} frames",
                        labels.len(),
                        frames.rows()
                    )));
                }
                if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
                    return Err(Error::InvalidInput(format!(
                        "label {bad} out of range for {num_classes} classes"
                    )));
                }
            }
            Targets::Soft(t) => {
                if t.rows() != frames.rows() || t.cols() != num_classes {
                    return Err(Error::DimensionMismatch(format!(
                        "soft targets are {}x{}, expected {}x{num_classes}",
                        t.rows(),
                        t.cols(),
                        frames.rows()
                    )));
                }
                check_distribution_rows(t)?;
            }
        }
        Ok(Self { frames, targets })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

fn check_distribution_rows(t: &Matrix) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row(r);
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > SOFT_TARGET_TOLERANCE || row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "target row {r} is not a distribution (sums to {sum})"
            )));
        }
    }
    Ok(())
}

/// Layer sizes of the reference network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Topology {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "topology {input_dim} -> {hidden:?} -> {num_classes} has an empty layer"
            )));
        }
        Ok(Self {
            input_dim,
            hidden,
            num_classes,
        })
    }

    /// `(fan_in, fan_out)` per affine layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    /// `layer{l}.weight` is `[fan_out x fan_in]` row-major, then `layer{l}.bias`.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (l, (fan_in, fan_out)) in self.layers().into_iter().enumerate() {
            out.push(Segment {
                name: format!("layer{l}.weight"),
                offset,
                len: fan_in * fan_out,
            });
            offset += fan_in * fan_out;
            out.push(Segment {
                name: format!("layer{l}.bias"),
                offset,
                len: fan_out,
            });
            offset += fan_out;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    topology: Topology,
    params: ParameterVector,
}

impl ReferenceModel {
    pub fn zeros(topology: Topology) -> Self {
        let params = ParameterVector {
            values: vec![0.0; topology.param_count()],
            segments: topology.segments(),
        };
        Self { topology, params }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(topology: Topology, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(topology);
        let mut offset = 0;
        for (fan_in, fan_out) in model.topology.layers() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut model.params.values[offset..offset + fan_in * fan_out] {
                *v = rng.random_range(-limit..limit) as f32;
            }
            offset += fan_in * fan_out + fan_out;
        }
        model
    }

    pub fn from_parts(topology: Topology, params: ParameterVector) -> Result<Self> {
        if params.segments() != topology.segments().as_slice() {
            return Err(Error::DimensionMismatch(format!(
                "parameter layout does not match topology {:?}",
                topology
            )));
        }
        Ok(Self { topology, params })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParameterVector) -> Result<()> {
        if params.segments() != self.params.segments() {
            return Err(Error::DimensionMismatch(
                "parameter layout does not match model".to_string(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn into_params(self) -> ParameterVector {
        self.params
    }

    fn check_input(&self, frames: &Matrix) -> Result<()> {
        if frames.cols() != self.topology.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} input features, batch has {}",
                self.topology.input_dim,
                frames.cols()
            )));
        }
        Ok(())
    }

    /// Logits `[rows x num_classes]`.
    pub fn forward(&self, frames: &Matrix) -> Result<Matrix> {
        self.check_input(frames)?;
        let mut acts = forward_pass(&self.topology, &self.params.values, frames.as_slice(), frames.rows());
        let logits = acts.pop().unwrap_or_default();
        Matrix::new(frames.rows(), self.topology.num_classes, logits)
    }

    /// Argmax class per row, ties to the lower index.
    pub fn predict(&self, frames: &Matrix) -> Result<Vec<u32>> {
        let logits = self.forward(frames)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r)) as u32).collect())
    }

    /// Fraction of rows whose prediction matches `labels`.
    pub fn accuracy(&self, frames: &Matrix, labels: &[u32]) -> Result<f64> {
        if labels.len() != frames.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} frames",
                labels.len(),
                frames.rows()
            )));
        }
        if labels.is_empty() {
            return Ok(0.0);
        }
        let predicted = self.predict(frames)?;
        let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Batch-mean cross-entropy and its gradient with respect to the parameters.
    pub fn loss_and_gradient(&self, batch: &MiniBatch) -> Result<(f64, GradientVector)> {
        self.check_input(&batch.frames)?;
        let (loss, grad) = loss_and_grad_generic(
            &self.topology,
            &self.params.values,
            batch.frames.as_slice(),
            batch.frames.rows(),
            &batch.targets,
        )?;
        Ok((loss, GradientVector::from(grad)))
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Activations of every layer: `[input, hidden.., logits]`.
fn forward_pass<T: Scalar>(topo: &Topology, params: &[T], input: &[f32], rows: usize) -> Vec<Vec<T>> {
    let layers = topo.layers();
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(layers.len() + 1);
    acts.push(input.iter().map(|&v| T::from_f64(v as f64)).collect());
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let hidden = l + 1 < layers.len();
        let x = &acts[l];
        let mut out = Vec::with_capacity(rows * fan_out);
        for r in 0..rows {
            let xr = &x[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let acc = b[o].to_f64() + dot(&w[o * fan_in..(o + 1) * fan_in], xr);
                out.push(T::from_f64(if hidden { acc.tanh() } else { acc }));
            }
        }
        acts.push(out);
    }
    acts
}

/// Dot product in `f64` with four interleaved partial sums.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            lanes[k] += x[k].to_f64() * y[k].to_f64();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x.to_f64() * y.to_f64();
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn loss_and_grad_generic<T: Scalar>(
    topo: &Topology,
    params: &[T],
    input: &[f32],
    rows: usize,
    targets: &Targets,
) -> Result<(f64, Vec<T>)> {
    let acts = forward_pass(topo, params, input, rows);
    let logits = acts.last().map(Vec::as_slice).unwrap_or_default();
    let (loss, dlogits) = cross_entropy_generic(logits, rows, topo.num_classes, targets)?;
    Ok((loss, backward_pass(topo, params, &acts, dlogits, rows)))
}

fn backward_pass<T: Scalar>(topo: &Topology, params: &[T], acts: &[Vec<T>], dlogits: Vec<T>, rows: usize) -> Vec<T> {
    let layers = topo.layers();
    let mut grad = vec![T::from_f64(0.0); params.len()];
    let mut offsets = Vec::with_capacity(layers.len());
    let mut offset = 0;
    for &(fan_in, fan_out) in &layers {
        offsets.push(offset);
        offset += fan_in * fan_out + fan_out;
    }

    let mut delta = dlogits;
    for l in (0..layers.len()).rev() {
        let (fan_in, fan_out) = layers[l];
        let off = offsets[l];
        let x = &acts[l];

        let mut gw = vec![0.0f64; fan_in * fan_out];
        let mut gb = vec![0.0f64; fan_out];
        for r in 0..rows {
            let xr = &x[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let d = delta[r * fan_out + o].to_f64();
                gb[o] += d;
                if d != 0.0 {
                    for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xr) {
                        *g += d * xi.to_f64();
                    }
                }
            }
        }
        for (dst, src) in grad[off..off + fan_in * fan_out].iter_mut().zip(&gw) {
            *dst = T::from_f64(*src);
        }
        for (dst, src) in grad[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]
            .iter_mut()
            .zip(&gb)
        {
            *dst = T::from_f64(*src);
        }

        if l > 0 {
            // Propagate through the weights and the tanh that produced acts[l].
            let w = &params[off..off + fan_in * fan_out];
            let mut prev = Vec::with_capacity(rows * fan_in);
            let mut acc = vec![0.0f64; fan_in];
            for r in 0..rows {
                acc.fill(0.0);
                for (o, d) in delta[r * fan_out..(r + 1) * fan_out].iter().enumerate() {
                    let d = d.to_f64();
                    for (a, wi) in acc.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *a += wi.to_f64() * d;
                    }
                }
                for (a, xi) in acc.iter().zip(&x[r * fan_in..(r + 1) * fan_in]) {
                    let xi = xi.to_f64();
                    prev.push(T::from_f64(a * (1.0 - xi * xi)));
                }
            }
            delta = prev;
        }
    }
    grad
}

/// Batch-mean cross-entropy of `logits` against `targets` and `d loss / d logits`.
fn cross_entropy_generic<T: Scalar>(
    logits: &[T],
    rows: usize,
    classes: usize,
    targets: &Targets,
) -> Result<(f64, Vec<T>)> {
    match targets {
        Targets::Hard(labels) if labels.len() != rows => {
            return Err(Error::DimensionMismatch(format!("{} labels for {rows} rows", labels.len())))
        }
        Targets::Soft(t) if t.rows() != rows || t.cols() != classes => {
            return Err(Error::DimensionMismatch(format!(
                "soft targets are {}x{}, logits are {rows}x{classes}",
                t.rows(),
                t.cols()
            )))
        }
        _ => {}
    }
    if rows == 0 {
        return Ok((0.0, Vec::new()));
    }
    let scale = 1.0 / rows as f64;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(rows * classes);
    let mut logp = vec![0.0f64; classes];
    for r in 0..rows {
        let row = &logits[r * classes..(r + 1) * classes];
        log_softmax_into(row, &mut logp);
        let mut row_loss = 0.0f64;
        for c in 0..classes {
            let t = match targets {
                Targets::Hard(labels) => {
                    if labels[r] as usize == c {
                        1.0
                    } else {
                        0.0
                    }
                }
                Targets::Soft(m) => m.row(r)[c] as f64,
            };
            if t != 0.0 {
                row_loss -= t * logp[c];
            }
            grad.push(T::from_f64((logp[c].exp() - t) * scale));
        }
        total += row_loss;
    }
    Ok((total * scale, grad))
}

fn log_softmax_into<T: Scalar>(row: &[T], out: &mut [f64]) {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
    let log_z = max + sum.ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v.to_f64() - log_z;
    }
}

/// Numerically stable softmax (max-subtracted, `f64` internally).
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Vec::with_capacity(logits.as_slice().len());
    for r in 0..logits.rows() {
        out.extend(softmax(logits.row(r)));
    }
    Matrix {
        rows: logits.rows(),
        cols: logits.cols(),
        data: out,
    }
}

/// Batch-mean `-sum_c t_c log softmax(s)_c` and its gradient `softmax(s) - t`
/// (divided by the batch size). Teacher rows must sum to one.
pub fn soft_cross_entropy(student_logits: &Matrix, teacher_posteriors: &Matrix) -> Result<(f64, Matrix)> {
    if teacher_posteriors.rows() != student_logits.rows() || teacher_posteriors.cols() != student_logits.cols() {
        return Err(Error::DimensionMismatch(format!(
            "student logits are {}x{}, teacher posteriors {}x{}",
            student_logits.rows(),
            student_logits.cols(),
            teacher_posteriors.rows(),
            teacher_posteriors.cols()
        )));
    }
    check_distribution_rows(teacher_posteriors)?;
    let (loss, grad) = cross_entropy_generic(
        student_logits.as_slice(),
        student_logits.rows(),
        student_logits.cols(),
        &Targets::Soft(teacher_posteriors.clone()),
    )?;
    Ok((loss, Matrix::new(student_logits.rows(), student_logits.cols(), grad)?))
}

/// Batch-mean negative log-likelihood of `labels` and its gradient.
pub fn hard_cross_entropy(logits: &Matrix, labels: &[u32]) -> Result<(f64, Matrix)> {
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= logits.cols()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let (loss, grad) = cross_entropy_generic(
        logits.as_slice(),
        logits.rows(),
        logits.cols(),
        &Targets::Hard(labels.to_vec()),
    )?;
    Ok((loss, Matrix::new(logits.rows(), logits.cols(), grad)?))
}

/// Per-worker SGD momentum state.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBuffer(pub Vec<f32>);

impl MomentumBuffer {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn reset(&mut self) {
        self.0.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `buf = momentum * buf + grad; params -= lr * buf`.
pub fn sgd_step(
    params: &mut ParameterVector,
    grad: &GradientVector,
    lr: f32,
    momentum: f32,
    buf: &mut MomentumBuffer,
) -> Result<()> {
    if grad.len() != params.len() || buf.0.len() != params.len() {
        return Err(Error::DimensionMismatch(format!(
            "params {}, gradient {}, momentum buffer {}",
            params.len(),
            grad.len(),
            buf.0.len()
        )));
    }
    if !(lr >= 0.0) || !lr.is_finite() || !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidConfig(format!(
            "lr {lr} must be finite and non-negative, momentum {momentum} in [0, 1)"
        )));
    }
    if let Some(i) = grad.first_non_finite() {
        return Err(Error::NonFinite(format!(
            "gradient coordinate {i} is {}; aborting update",
            grad.values[i]
        )));
    }
    for ((p, b), &g) in params.values.iter_mut().zip(buf.0.iter_mut()).zip(&grad.values) {
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
    if let Some(i) = params.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {i} diverged after update")));
    }
    Ok(())
}

/// Coordinates probed by [`finite_diff_check`].
pub const FINITE_DIFF_SAMPLES: usize = 256;

/// Largest relative error `|g_analytic - g_fd| / (|g_fd| + 1e-8)` over a
/// sample of coordinates (all of them when the model has fewer than
/// [`FINITE_DIFF_SAMPLES`]). Both sides are evaluated in `f64`.
pub fn finite_diff_check(model: &ReferenceModel, batch: &MiniBatch, eps: f64) -> Result<f64> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::InvalidInput(format!("eps {eps} outside [1e-5, 1e-2]")));
    }
    model.check_input(&batch.frames)?;
    let topo = &model.topology;
    let mut params: Vec<f64> = model.params.values.iter().map(|&v| v as f64).collect();
    let input = batch.frames.as_slice();
    let rows = batch.frames.rows();
    let (_, analytic) = loss_and_grad_generic(topo, &params, input, rows, &batch.targets)?;

    let n = params.len();
    let coords: Vec<usize> = if n <= FINITE_DIFF_SAMPLES {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut picked = rand::seq::index::sample(&mut rng, n, FINITE_DIFF_SAMPLES).into_vec();
        picked.sort_unstable();
        picked
    };

    let loss_at = |p: &[f64]| -> Result<f64> {
        let acts = forward_pass(topo, p, input, rows);
        let logits = acts.last().map(Vec::as_slice).unwrap_or_default();
        Ok(cross_entropy_generic(logits, rows, topo.num_classes, &batch.targets)?.0)
    };

    let mut worst = 0.0f64;
    for i in coords {
        let orig = params[i];
        params[i] = orig + eps;
        let up = loss_at(&params)?;
        params[i] = orig - eps;
        let down = loss_at(&params)?;
        params[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
