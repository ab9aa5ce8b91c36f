//! Top-k logit codec for soft targets.

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_FILL: f32 = -1.0e4;

/// The k largest logits of one frame, indices ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKRow {
    pub indices: Vec<u32>,
    pub logits: Vec<f32>,
}

/// Per-frame top-k logits for one utterance, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKTargets {
    k: usize,
    indices: Vec<u32>,
    logits: Vec<f32>,
}

impl TopKTargets {
    pub fn new(k: usize, indices: Vec<u32>, logits: Vec<f32>) -> Result<Self> {
        if k == 0 || indices.len() != logits.len() || indices.len() % k != 0 {
            return Err(Error::InvalidInput(format!(
                "top-k block with k={k}, {} indices, {} logits",
                indices.len(),
                logits.len()
            )));
        }
        let t = Self { k, indices, logits };
        for f in 0..t.frames() {
            let (idx, val) = t.row(f);
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidInput(format!("frame {f}: top-k indices not strictly ascending")));
            }
            if val.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("frame {f}: top-k logit")));
            }
        }
        Ok(t)
    }

    pub fn from_rows(k: usize, rows: &[TopKRow]) -> Result<Self> {
        let mut indices = Vec::with_capacity(rows.len() * k);
        let mut logits = Vec::with_capacity(rows.len() * k);
        for r in rows {
            if r.indices.len() != k || r.logits.len() != k {
                return Err(Error::InvalidInput(format!("top-k row has {} entries, expected {k}", r.indices.len())));
            }
            indices.extend_from_slice(&r.indices);
            logits.extend_from_slice(&r.logits);
        }
        Self::new(k, indices, logits)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn frames(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, frame: usize) -> (&[u32], &[f32]) {
        let r = frame * self.k..(frame + 1) * self.k;
        (&self.indices[r.clone()], &self.logits[r])
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    /// Dense logits `[frames x num_classes]`, row-major.
    pub fn reconstruct(&self, num_classes: usize, fill: f32) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.frames() * num_classes);
        for f in 0..self.frames() {
            let (idx, val) = self.row(f);
            out.extend(reconstruct_topk(idx, val, num_classes, fill)?);
        }
        Ok(out)
    }
}

/// Keeps the `k` largest logits, ties going to the lower index.
///
/// A `k` above the number of classes is clamped.
pub fn encode_topk(logits: &[f32], k: usize) -> Result<TopKRow> {
    if k == 0 {
        return Err(Error::InvalidInput("top-k requires k >= 1".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i} is {}", logits[i])));
    }
    let k = if k > logits.len() {
        log::warn!("top-k: k={k} exceeds {} classes, clamping", logits.len());
        logits.len()
    } else {
        k
    };
    let mut order: Vec<u32> = (0..logits.len() as u32).collect();
    order.sort_by(|&a, &b| logits[b as usize].total_cmp(&logits[a as usize]).then(a.cmp(&b)));
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();

    let min_kept = indices.iter().map(|&i| logits[i as usize]).fold(f32::INFINITY, f32::min);
    if let Some(&i) = order[k..].iter().find(|&&i| logits[i as usize] > min_kept) {
        return Err(Error::Protocol(format!("top-k dominance violated at class {i}")));
    }
    let values = indices.iter().map(|&i| logits[i as usize]).collect();
    Ok(TopKRow { indices, logits: values })
}

/// Dense logits with `fill` at every unstored class.
pub fn reconstruct_topk(indices: &[u32], logits: &[f32], num_classes: usize, fill: f32) -> Result<Vec<f32>> {
    if indices.len() != logits.len() {
        return Err(Error::DimensionMismatch(format!("{} indices, {} logits", indices.len(), logits.len())));
    }
    let mut out = vec![fill; num_classes];
    for (&i, &v) in indices.iter().zip(logits) {
        let slot = out
            .get_mut(i as usize)
            .ok_or_else(|| Error::InvalidInput(format!("top-k index {i} outside {num_classes} classes")))?;
        *slot = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::softmax;

    #[test]
    fn direct_rule() {
        let row = encode_topk(&[2.0, 1.0, 0.0, -1.0], 2).unwrap();
        assert_eq!(row.indices, vec![0, 1]);
        assert_eq!(row.logits, vec![2.0, 1.0]);
        let dense = reconstruct_topk(&row.indices, &row.logits, 4, DEFAULT_FILL).unwrap();
        assert_eq!(dense, vec![2.0, 1.0, -1e4, -1e4]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(encode_topk(&[0.5; 6], 2).unwrap().indices, vec![0, 1]);
        assert_eq!(encode_topk(&[0.0, 1.0, 0.0, 1.0], 1).unwrap().indices, vec![1]);
    }

    #[test]
    fn indices_are_ascending_even_when_values_are_not() {
        let row = encode_topk(&[0.0, 3.0, -2.0, 5.0, 4.0], 3).unwrap();
        assert_eq!(row.indices, vec![1, 3, 4]);
        assert_eq!(row.logits, vec![3.0, 5.0, 4.0]);
    }

    #[test]
    fn k_is_clamped_and_full_k_is_lossless() {
        let logits = [0.3, -1.2, 2.5];
        let row = encode_topk(&logits, 10).unwrap();
        assert_eq!(row.indices.len(), 3);
        assert_eq!(reconstruct_topk(&row.indices, &row.logits, 3, DEFAULT_FILL).unwrap(), logits.to_vec());
        assert!(encode_topk(&logits, 0).is_err());
        assert!(encode_topk(&[f32::NAN, 0.0], 1).is_err());
    }

    #[test]
    fn stored_class_ratios_survive_reconstruction() {
        let logits = [1.0, 0.2, -0.5, 3.0, 2.0];
        let row = encode_topk(&logits, 3).unwrap();
        let full = softmax(&logits);
        let rec = softmax(&reconstruct_topk(&row.indices, &row.logits, 5, DEFAULT_FILL).unwrap());
        let (a, b) = (row.indices[0] as usize, row.indices[1] as usize);
        assert!(((full[a] / full[b]) / (rec[a] / rec[b]) - 1.0).abs() < 1e-6);
        assert_eq!(rec[1], 0.0);
    }

    #[test]
    fn targets_block_validates_rows() {
        assert!(TopKTargets::new(2, vec![0, 1, 3, 2], vec![0.0; 4]).is_err());
        let t = TopKTargets::new(2, vec![0, 1, 2, 3], vec![1.0, 0.0, 2.0, 1.0]).unwrap();
        assert_eq!(t.frames(), 2);
        assert_eq!(t.row(1), (&[2u32, 3][..], &[2.0f32, 1.0][..]));
        assert_eq!(t.reconstruct(4, -1e4).unwrap(), vec![1.0, 0.0, -1e4, -1e4, -1e4, -1e4, 2.0, 1.0]);
    }
}
