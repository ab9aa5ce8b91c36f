use std::collections::BTreeMap;

use super::manifest::UtteranceMeta;
use super::{Record, Shard};
use crate::error::{Error, Result};

/// Relative deviation from the target size that still counts as balanced.
pub const BALANCE_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ShardAssignment {
    pub name: String,
    /// Utterances grouped by speaker, each speaker in timestamp order.
    pub utterances: Vec<UtteranceMeta>,
    pub hours: f64,
    /// A single speaker larger than the target shard size.
    pub oversized: bool,
}

pub fn shard_name(i: usize) -> String {
    format!("shard-{i:05}")
}

pub fn partition_name(i: usize) -> String {
    format!("part-{i:05}")
}

/// Packs whole speakers into shards of roughly `target_shard_hours`.
///
/// Speakers go largest first onto the currently lightest shard. The shard
/// count is the remaining volume divided by the target, rounded. A speaker
/// above the target gets a shard of its own.
pub fn shard_by_speaker(metas: &[UtteranceMeta], target_shard_hours: f64) -> Result<Vec<ShardAssignment>> {
    if !(target_shard_hours > 0.0) {
        return Err(Error::InvalidInput(format!("shard size must be positive, got {target_shard_hours} h")));
    }
    let mut speakers: BTreeMap<&str, Vec<&UtteranceMeta>> = BTreeMap::new();
    for m in metas {
        speakers.entry(m.speaker_id.as_str()).or_default().push(m);
    }
    let mut speakers: Vec<(&str, f64, Vec<&UtteranceMeta>)> = speakers
        .into_iter()
        .map(|(id, mut utts)| {
            utts.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.utterance_id.cmp(&b.utterance_id)));
            let hours = utts.iter().map(|u| u.duration_s).sum::<f64>() / 3600.0;
            (id, hours, utts)
        })
        .collect();
    speakers.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let (big, rest): (Vec<_>, Vec<_>) = speakers.into_iter().partition(|s| s.1 > target_shard_hours);
    let rest_hours: f64 = rest.iter().map(|s| s.1).sum();
    let bins = if rest.is_empty() {
        0
    } else {
        ((rest_hours / target_shard_hours).round() as usize).clamp(1, rest.len())
    };

    let mut out: Vec<ShardAssignment> = (0..bins)
        .map(|i| ShardAssignment { name: shard_name(i), utterances: Vec::new(), hours: 0.0, oversized: false })
        .collect();
    for (_, hours, utts) in rest {
        let lightest = (0..bins)
            .min_by(|&a, &b| out[a].hours.total_cmp(&out[b].hours).then(a.cmp(&b)))
            .expect("at least one bin");
        out[lightest].hours += hours;
        out[lightest].utterances.extend(utts.into_iter().cloned());
    }
    for (id, hours, utts) in big {
        log::warn!("speaker {id} has {hours:.3} h, above the {target_shard_hours} h shard target; giving it its own shard");
        out.push(ShardAssignment {
            name: shard_name(out.len()),
            utterances: utts.into_iter().cloned().collect(),
            hours,
            oversized: true,
        });
    }
    Ok(out)
}

/// Redistributes records into `target` partitions of near-equal frame count.
///
/// Records keep their order and are cut into contiguous runs: a record goes
/// to the partition containing the midpoint of its frames. When the input
/// already has `target` balanced shards, they are kept as they are.
pub fn repartition(shards: Vec<Shard>, target: usize) -> Result<Vec<Shard>> {
    if target == 0 {
        return Err(Error::InvalidInput("repartition target must be at least 1".into()));
    }
    let sizes: Vec<usize> = shards.iter().map(Shard::frame_count).collect();
    let total: usize = sizes.iter().sum();
    let mean = total as f64 / target as f64;
    if shards.len() == target && sizes.iter().all(|&s| (s as f64 - mean).abs() <= BALANCE_TOLERANCE * mean) {
        return Ok(shards
            .into_iter()
            .enumerate()
            .map(|(i, s)| Shard { name: partition_name(i), records: s.records })
            .collect());
    }

    let records: Vec<Record> = shards.into_iter().flat_map(|s| s.records).collect();
    let count = if records.len() < target {
        log::warn!("repartition: {} records cannot fill {target} partitions", records.len());
        records.len().max(1)
    } else {
        target
    };
    let mut out: Vec<Shard> = (0..count).map(|i| Shard { name: partition_name(i), records: Vec::new() }).collect();
    let mut before = 0usize;
    for r in records {
        let len = r.frames.rows();
        let mid = before as f64 + len as f64 / 2.0;
        let p = if total == 0 { 0 } else { ((mid * count as f64 / total as f64) as usize).min(count - 1) };
        before += len;
        out[p].records.push(r);
    }
    Ok(out)
}
