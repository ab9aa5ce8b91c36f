use super::topk::{encode_topk, TopKRow, TopKTargets};
use super::{Record, Shard};
use crate::error::{Error, Result};
use crate::model::{Matrix, ReferenceModel};

pub const DEFAULT_TARGET_BATCH: usize = 256;

/// Labels every frame of `shard` with the teacher's top-k logits.
///
/// Frames of consecutive records are packed into batches of `batch_size`.
/// Each output row depends only on its own input row, so the result does not
/// depend on the batch size.
pub fn generate_targets(teacher: &ReferenceModel, shard: &Shard, k: usize, batch_size: usize) -> Result<Shard> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("target batch size must be at least 1".into()));
    }
    let dim = teacher.topology().input_dim;
    for r in &shard.records {
        if r.frames.cols() != dim && r.frames.rows() > 0 {
            return Err(Error::DimensionMismatch(format!(
                "shard {} utterance {}: frames have {} dims, teacher expects {dim}",
                shard.name,
                r.utterance_id,
                r.frames.cols()
            )));
        }
    }

    let total: usize = shard.frame_count();
    let mut flat = Vec::with_capacity(total * dim);
    for r in &shard.records {
        flat.extend_from_slice(r.frames.as_slice());
    }
    let mut rows: Vec<TopKRow> = Vec::with_capacity(total);
    let mut start = 0;
    while start < total {
        let end = (start + batch_size).min(total);
        let batch = Matrix::new(end - start, dim, flat[start * dim..end * dim].to_vec())?;
        let logits = teacher.forward(&batch)?;
        for i in 0..logits.rows() {
            rows.push(encode_topk(logits.row(i), k)?);
        }
        start = end;
    }

    let k = k.min(teacher.topology().num_classes);
    let mut out = Vec::with_capacity(shard.records.len());
    let mut at = 0;
    for r in &shard.records {
        let n = r.frames.rows();
        out.push(Record {
            targets: Some(TopKTargets::from_rows(k, &rows[at..at + n])?),
            ..r.clone()
        });
        at += n;
    }
    Ok(Shard { name: shard.name.clone(), records: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::topk::DEFAULT_FILL;
    use crate::model::Topology;

    fn shard(dim: usize) -> Shard {
        let rec = |id: &str, t: usize, s: f32| Record {
            utterance_id: id.into(),
            speaker_id: "s".into(),
            timestamp: 0,
            frames: Matrix::new(t, dim, (0..t * dim).map(|i| ((i as f32) * s).sin()).collect()).unwrap(),
            targets: None,
        };
        Shard { name: "shard-00000".into(), records: vec![rec("a", 7, 0.3), rec("b", 0, 1.0), rec("c", 12, 0.7)] }
    }

    #[test]
    fn batch_size_does_not_matter() {
        let teacher = ReferenceModel::init(Topology::new(6, vec![9], 5).unwrap(), 4);
        let s = shard(6);
        let a = generate_targets(&teacher, &s, 3, 1).unwrap();
        let b = generate_targets(&teacher, &s, 3, 64).unwrap();
        let c = generate_targets(&teacher, &s, 3, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.records[1].targets.as_ref().unwrap().frames(), 0);
    }

    #[test]
    fn full_k_reconstructs_teacher_logits() {
        let teacher = ReferenceModel::init(Topology::new(6, vec![9], 5).unwrap(), 4);
        let s = shard(6);
        let t = generate_targets(&teacher, &s, 5, 4).unwrap();
        let rec = &t.records[2];
        let dense = rec.targets.as_ref().unwrap().reconstruct(5, DEFAULT_FILL).unwrap();
        assert_eq!(dense, teacher.forward(&rec.frames).unwrap().into_vec());
    }

    #[test]
    fn dim_mismatch_names_shard_and_utterance() {
        let teacher = ReferenceModel::init(Topology::new(4, vec![3], 5).unwrap(), 4);
        let err = generate_targets(&teacher, &shard(6), 2, 8).unwrap_err().to_string();
        assert!(err.contains("shard-00000") && err.contains("utterance a"), "{err}");
    }
}
