//! Scheduled learning: unlabeled sub-epochs interleaved with labeled passes
//! under exponential learning-rate decay.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub sub_epochs: usize,
    pub lr0: f64,
    /// Per sub-epoch decay factor.
    pub decay: f64,
    pub labeled_boost: f64,
    /// Insert a labeled pass after every unlabeled sub-epoch.
    pub interleave_labeled: bool,
    /// Sub-epoch where chunked training would hand over to fine-tuning.
    /// Recorded only.
    pub finetune_from: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sub_epochs: 6,
            lr0: 0.2,
            decay: 0.7,
            labeled_boost: 1.5,
            interleave_labeled: true,
            finetune_from: 5,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sub_epochs == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one sub-epoch".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::InvalidConfig(format!("decay must lie in (0, 1), got {}", self.decay)));
        }
        if !(self.labeled_boost > 0.0 && self.labeled_boost.is_finite()) {
            return Err(Error::InvalidConfig(format!("labeled boost must be positive, got {}", self.labeled_boost)));
        }
        if self.finetune_from > self.sub_epochs {
            return Err(Error::InvalidConfig(format!(
                "finetune_from {} beyond {} sub-epochs",
                self.finetune_from, self.sub_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// Partitions `[start, end)` of the unlabeled corpus.
    Unlabeled { start: usize, end: usize },
    /// The whole labeled set, stacked at `offset`.
    Labeled { offset: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub index: usize,
    pub sub_epoch: usize,
    #[serde(flatten)]
    pub kind: EventKind,
    pub lr: f64,
}

impl ScheduleEvent {
    pub fn partitions(&self) -> Option<Range<usize>> {
        match self.kind {
            EventKind::Unlabeled { start, end } => Some(start..end),
            EventKind::Labeled { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub config: ScheduleConfig,
    pub unlabeled_partitions: usize,
    pub events: Vec<ScheduleEvent>,
}

pub fn offset_for(sub_epoch: usize) -> usize {
    sub_epoch % 3
}

pub fn lr_at(cfg: &ScheduleConfig, sub_epoch: usize, labeled: bool) -> Result<f64> {
    if sub_epoch >= cfg.sub_epochs {
        return Err(Error::InvalidInput(format!(
            "sub-epoch {sub_epoch} outside a {}-sub-epoch schedule",
            cfg.sub_epochs
        )));
    }
    let lr = cfg.lr0 * cfg.decay.powi(sub_epoch as i32);
    Ok(if labeled { lr * cfg.labeled_boost } else { lr })
}

/// Partitions of sub-epoch `s`: contiguous, sizes differing by at most one.
pub fn sub_epoch_range(partitions: usize, sub_epochs: usize, s: usize) -> Range<usize> {
    (s * partitions / sub_epochs)..((s + 1) * partitions / sub_epochs)
}

/// One pass over the unlabeled partitions split into sub-epochs, each
/// followed by a labeled pass when labeled data is available.
pub fn build_schedule(cfg: &ScheduleConfig, unlabeled_partitions: usize, labeled_available: bool) -> Result<SchedulePlan> {
    cfg.validate()?;
    let labeled = cfg.interleave_labeled && labeled_available;
    if cfg.interleave_labeled && !labeled_available {
        log::warn!("schedule: no labeled data, dropping labeled passes");
    }
    if unlabeled_partitions == 0 && !labeled {
        return Err(Error::InvalidConfig("schedule has neither unlabeled partitions nor labeled passes".into()));
    }
    let mut events = Vec::new();
    for s in 0..cfg.sub_epochs {
        let r = sub_epoch_range(unlabeled_partitions, cfg.sub_epochs, s);
        if !r.is_empty() {
            events.push(ScheduleEvent {
                index: events.len(),
                sub_epoch: s,
                kind: EventKind::Unlabeled { start: r.start, end: r.end },
                lr: lr_at(cfg, s, false)?,
            });
        }
        if labeled {
            events.push(ScheduleEvent {
                index: events.len(),
                sub_epoch: s,
                kind: EventKind::Labeled { offset: offset_for(s) },
                lr: lr_at(cfg, s, true)?,
            });
        }
    }
    Ok(SchedulePlan { config: cfg.clone(), unlabeled_partitions, events })
}

impl SchedulePlan {
    /// One JSON event per line.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        crate::fsutil::to_json_lines(&self.events)
    }
}
