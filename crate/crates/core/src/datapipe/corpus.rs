//! Synthetic speech-like corpus.
//!
//! Each frame is drawn around the mean of its class, shifted by a
//! per-speaker offset, plus isotropic noise. Classes come in runs of a few
//! frames, like phone segments, so neighbouring frames mostly share a label.
//! Utterance payloads are never stored: the manifest locator
//! `synth:<speaker_seed>:<utterance_seed>` regenerates frames and labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::UtteranceMeta;
use crate::error::{Error, Result};
use crate::model::Matrix;

const CLASS_MEAN_STREAM: u64 = 0x636c_6173_735f_6d75;
const BASE_TIMESTAMP: u64 = 1_546_300_800;
const TIMESTAMP_SPAN: u64 = 90 * 24 * 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Hours in the unlabeled pool the selection step samples from.
    pub pool_hours: f64,
    pub pool_speakers: usize,
    pub labeled_hours: f64,
    pub labeled_speakers: usize,
    pub heldout_hours: f64,
    pub heldout_speakers: usize,
    pub raw_dim: usize,
    pub classes: usize,
    /// Synthetic frames per second of audio.
    pub frames_per_second: f64,
    pub min_utterance_s: f64,
    pub max_utterance_s: f64,
    pub min_segment_frames: usize,
    pub max_segment_frames: usize,
    /// Standard deviation of the class means.
    pub class_separation: f64,
    pub noise: f64,
    /// Standard deviation of the per-speaker feature offset.
    pub speaker_offset: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pool_hours: 24.0,
            pool_speakers: 1000,
            labeled_hours: 2.0,
            labeled_speakers: 100,
            heldout_hours: 0.5,
            heldout_speakers: 25,
            raw_dim: 8,
            classes: 32,
            frames_per_second: 10.0,
            min_utterance_s: 2.0,
            max_utterance_s: 10.0,
            min_segment_frames: 3,
            max_segment_frames: 8,
            class_separation: 1.0,
            noise: 0.6,
            speaker_offset: 2.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.pool_hours > 0.0
            && self.pool_speakers > 0
            && self.labeled_hours >= 0.0
            && self.heldout_hours >= 0.0
            && self.raw_dim > 0
            && self.raw_dim <= u16::MAX as usize / 3
            && self.classes >= 2
            && self.frames_per_second > 0.0
            && self.min_utterance_s > 0.0
            && self.max_utterance_s >= self.min_utterance_s
            && self.min_segment_frames >= 1
            && self.max_segment_frames >= self.min_segment_frames
            && self.noise >= 0.0
            && self.speaker_offset >= 0.0
            && (self.labeled_hours == 0.0 || self.labeled_speakers > 0)
            && (self.heldout_hours == 0.0 || self.heldout_speakers > 0);
        if !ok {
            return Err(Error::InvalidConfig(format!("corpus config out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Manifests produced by [`SyntheticCorpus::manifests`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifests {
    pub pool: Vec<UtteranceMeta>,
    pub labeled: Vec<UtteranceMeta>,
    pub heldout: Vec<UtteranceMeta>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    cfg: CorpusConfig,
    seed: u64,
    class_means: Vec<Vec<f64>>,
}

impl SyntheticCorpus {
    pub fn new(cfg: CorpusConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CLASS_MEAN_STREAM);
        let class_means = (0..cfg.classes)
            .map(|_| {
                (0..cfg.raw_dim)
                    .map(|_| cfg.class_separation * std_normal(&mut rng))
                    .collect()
            })
            .collect();
        Ok(Self { cfg, seed, class_means })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.cfg
    }

    pub fn manifests(&self) -> CorpusManifests {
        CorpusManifests {
            pool: self.pool("u", 1, self.cfg.pool_hours, self.cfg.pool_speakers),
            labeled: self.pool("l", 2, self.cfg.labeled_hours, self.cfg.labeled_speakers),
            heldout: self.pool("h", 3, self.cfg.heldout_hours, self.cfg.heldout_speakers),
        }
    }

    fn pool(&self, tag: &str, stream: u64, hours: f64, speakers: usize) -> Vec<UtteranceMeta> {
        let mut out = Vec::new();
        if hours <= 0.0 || speakers == 0 {
            return out;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let weights: Vec<f64> = (0..speakers).map(|_| rng.random_range(0.5..1.5)).collect();
        let weight_sum: f64 = weights.iter().sum();
        let total_s = hours * 3600.0;
        for (s, w) in weights.iter().enumerate() {
            let speaker_id = format!("spk-{tag}{s:05}");
            let speaker_seed: u64 = rng.random();
            let budget = total_s * w / weight_sum;
            let mut used = 0.0;
            let mut u = 0usize;
            while used < budget {
                let duration = rng.random_range(self.cfg.min_utterance_s..=self.cfg.max_utterance_s);
                let duration = (duration * 100.0).round() / 100.0;
                let utt_seed: u64 = rng.random();
                out.push(UtteranceMeta {
                    utterance_id: format!("{speaker_id}-{u:04}"),
                    speaker_id: speaker_id.clone(),
                    duration_s: duration,
                    timestamp: BASE_TIMESTAMP + rng.random_range(0..TIMESTAMP_SPAN),
                    locator: format!("synth:{speaker_seed}:{utt_seed}"),
                });
                used += duration;
                u += 1;
            }
        }
        out
    }

    pub fn frame_count(&self, meta: &UtteranceMeta) -> usize {
        ((meta.duration_s * self.cfg.frames_per_second).round() as usize).max(1)
    }

    /// Raw frames `[T x raw_dim]` and the class of every frame.
    pub fn render(&self, meta: &UtteranceMeta) -> Result<(Matrix, Vec<u32>)> {
        let (speaker_seed, utt_seed) = parse_locator(&meta.locator)?;
        let mut spk = ChaCha8Rng::seed_from_u64(speaker_seed);
        let offset: Vec<f64> = (0..self.cfg.raw_dim)
            .map(|_| self.cfg.speaker_offset * std_normal(&mut spk))
            .collect();

        let frames = self.frame_count(meta);
        let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
        let mut labels = Vec::with_capacity(frames);
        while labels.len() < frames {
            let class = rng.random_range(0..self.cfg.classes as u32);
            let run = rng.random_range(self.cfg.min_segment_frames..=self.cfg.max_segment_frames);
            labels.extend(std::iter::repeat_n(class, run.min(frames - labels.len())));
        }
        let mut data = Vec::with_capacity(frames * self.cfg.raw_dim);
        for &c in &labels {
            let mean = &self.class_means[c as usize];
            for d in 0..self.cfg.raw_dim {
                let eps = std_normal(&mut rng);
                data.push((mean[d] + offset[d] + self.cfg.noise * eps) as f32);
            }
        }
        Ok((Matrix::new(frames, self.cfg.raw_dim, data)?, labels))
    }
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn parse_locator(locator: &str) -> Result<(u64, u64)> {
    let bad = || Error::Parse {
        what: "synthetic locator".to_string(),
        reason: format!("{locator:?} is not synth:<speaker_seed>:<utterance_seed>"),
    };
    let rest = locator.strip_prefix("synth:").ok_or_else(bad)?;
    let (a, b) = rest.split_once(':').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}
