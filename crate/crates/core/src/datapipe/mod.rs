//! Data pipeline: selection, speaker sharding, normalization, shuffling,
//! teacher targets and repartitioning.

pub mod corpus;
pub mod features;
pub mod manifest;
pub mod pipeline;
pub mod select;
pub mod shard_file;
pub mod sharding;
pub mod shuffle;
pub mod targets;
pub mod topk;

use crate::model::Matrix;
use topk::TopKTargets;

/// One utterance with its frames and, after target generation, its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub utterance_id: String,
    pub speaker_id: String,
    pub timestamp: u64,
    pub frames: Matrix,
    pub targets: Option<TopKTargets>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub name: String,
    pub records: Vec<Record>,
}

impl Shard {
    pub fn frame_count(&self) -> usize {
        self.records.iter().map(|r| r.frames.rows()).sum()
    }

    pub fn has_targets(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.targets.is_some())
    }
}
