//! Pipeline stages, in memory and as on-disk steps.
//!
//! Data directory layout:
//!
//! ```text
//! corpus.json                 generator config and seed
//! manifests/{pool,labeled,heldout}.jsonl
//! selected.jsonl
//! raw/shard-*.pbam            raw frames grouped by speaker
//! norm/shard-*.pbam, stats.json
//! teacher.pbmd
//! targets/shard-*.pbam
//! parts/part-*.pbam
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{CorpusConfig, SyntheticCorpus};
use super::features::{
    accumulate_stats, stack_and_subsample, stack_labels, CausalMean, GlobalStats, StatsAccumulator, STACK,
};
use super::manifest::{read_manifest, write_manifest, UtteranceMeta};
use super::select::select_data;
use super::shard_file::{clear_shards, list_shards, read_shard, write_shard};
use super::sharding::{repartition, shard_by_speaker, shard_name, ShardAssignment};
use super::shuffle::hierarchical_shuffle;
use super::targets::{generate_targets, DEFAULT_TARGET_BATCH};
use super::topk::DEFAULT_K;
use super::{Record, Shard};
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::model::{Matrix, ReferenceModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub select_hours: f64,
    pub shard_hours: f64,
    pub partitions: usize,
    pub k: usize,
    pub target_batch: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            select_hours: 20.0,
            shard_hours: 0.2,
            partitions: 250,
            k: DEFAULT_K,
            target_batch: DEFAULT_TARGET_BATCH,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.select_hours > 0.0 && self.shard_hours > 0.0)
            || self.partitions == 0
            || self.k == 0
            || self.target_batch == 0
        {
            return Err(Error::InvalidConfig(format!("pipeline config out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub config: CorpusConfig,
}

/// Paths inside a pipeline data directory.
#[derive(Debug, Clone)]
pub struct DataLayout {
    pub root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn corpus_spec(&self) -> PathBuf {
        self.root.join("corpus.json")
    }
    pub fn pool_manifest(&self) -> PathBuf {
        self.root.join("manifests/pool.jsonl")
    }
    pub fn labeled_manifest(&self) -> PathBuf {
        self.root.join("manifests/labeled.jsonl")
    }
    pub fn heldout_manifest(&self) -> PathBuf {
        self.root.join("manifests/heldout.jsonl")
    }
    pub fn selected_manifest(&self) -> PathBuf {
        self.root.join("selected.jsonl")
    }
    pub fn raw_dir(&self) -> PathBuf {
        self.root.join("raw")
    }
    pub fn norm_dir(&self) -> PathBuf {
        self.root.join("norm")
    }
    pub fn stats(&self) -> PathBuf {
        self.root.join("stats.json")
    }
    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher.pbmd")
    }
    pub fn targets_dir(&self) -> PathBuf {
        self.root.join("targets")
    }
    pub fn parts_dir(&self) -> PathBuf {
        self.root.join("parts")
    }
}

pub fn require(path: &Path, step: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::missing(path, format!("run `pbam pipeline {step}` first")))
    }
}

pub fn require_shards(dir: &Path, step: &str) -> Result<Vec<PathBuf>> {
    require(dir, step)?;
    let paths = list_shards(dir)?;
    if paths.is_empty() {
        return Err(Error::missing(dir, format!("no shard files; run `pbam pipeline {step}` first")));
    }
    Ok(paths)
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<Shard>> {
    paths.par_iter().map(|p| read_shard(p)).collect()
}

fn write_all(dir: &Path, shards: &[Shard]) -> Result<()> {
    clear_shards(dir)?;
    shards.par_iter().try_for_each(|s| write_shard(dir, s).map(|_| ()))
}

/// Orders utterances by speaker, then timestamp, then id.
fn speaker_streams<'a, T>(items: &'a [T], key: impl Fn(&T) -> (&str, u64, &str)) -> BTreeMap<&'a str, Vec<&'a T>>
where
    T: 'a,
{
    let mut streams: BTreeMap<&str, Vec<&T>> = BTreeMap::new();
    for it in items {
        streams.entry(key(it).0).or_default().push(it);
    }
    for v in streams.values_mut() {
        v.sort_by(|a, b| {
            let (_, ta, ia) = key(a);
            let (_, tb, ib) = key(b);
            ta.cmp(&tb).then_with(|| ia.cmp(ib))
        });
    }
    streams
}

/// Renders the raw frames of every assigned utterance.
pub fn render_shards(corpus: &SyntheticCorpus, assignments: &[ShardAssignment]) -> Result<Vec<Shard>> {
    assignments
        .par_iter()
        .map(|a| {
            let records = a
                .utterances
                .iter()
                .map(|m| {
                    let (frames, _) = corpus.render(m)?;
                    Ok(Record {
                        utterance_id: m.utterance_id.clone(),
                        speaker_id: m.speaker_id.clone(),
                        timestamp: m.timestamp,
                        frames,
                        targets: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Shard { name: a.name.clone(), records })
        })
        .collect()
}

/// Causal mean per speaker stream, then stacking. Utterance `i` of a
/// speaker stream is stacked at offset `i mod 3` so that every offset is
/// represented across the corpus.
pub fn featurize_shard(shard: &Shard) -> Result<Shard> {
    let streams = speaker_streams(&shard.records, |r| (&r.speaker_id, r.timestamp, &r.utterance_id));
    let mut records = Vec::with_capacity(shard.records.len());
    for utts in streams.values() {
        let mut cm = CausalMean::new(utts[0].frames.cols());
        for (i, r) in utts.iter().enumerate() {
            let normalized = cm.apply(&r.frames)?;
            records.push(Record {
                frames: stack_and_subsample(&normalized, i % STACK)?,
                targets: None,
                ..(*r).clone()
            });
        }
    }
    Ok(Shard { name: shard.name.clone(), records })
}

/// Featurizes, shuffles and globally normalizes raw shards.
pub fn normalize_shards(raw: &[Shard], seed: u64) -> Result<(Vec<Shard>, GlobalStats)> {
    let featurized: Vec<Shard> = raw.par_iter().map(featurize_shard).collect::<Result<_>>()?;
    let mut shuffled = hierarchical_shuffle(featurized, seed);
    for (i, s) in shuffled.iter_mut().enumerate() {
        s.name = shard_name(i);
    }
    let partial: Vec<StatsAccumulator> = shuffled.par_iter().map(accumulate_stats).collect::<Result<_>>()?;
    let mut acc = StatsAccumulator::new(0);
    for p in &partial {
        acc.merge(p)?;
    }
    let stats = acc.finalize()?;
    let normalized = shuffled
        .into_par_iter()
        .map(|s| {
            let records = s
                .records
                .into_iter()
                .map(|r| Ok(Record { frames: stats.apply(&r.frames)?, ..r }))
                .collect::<Result<Vec<_>>>()?;
            Ok(Shard { name: s.name, records })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((normalized, stats))
}

/// Labeled frames stacked at each of the three offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub offsets: Vec<(Matrix, Vec<u32>)>,
}

impl LabeledFeatures {
    pub fn frames(&self) -> usize {
        self.offsets.iter().map(|(m, _)| m.rows()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.frames() == 0
    }

    pub fn at_offset(&self, offset: usize) -> (&Matrix, &[u32]) {
        let (m, l) = &self.offsets[offset % self.offsets.len()];
        (m, l)
    }

    /// All offsets concatenated.
    pub fn pooled(&self) -> (Matrix, Vec<u32>) {
        let cols = self.offsets.first().map_or(0, |(m, _)| m.cols());
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (m, l) in &self.offsets {
            data.extend_from_slice(m.as_slice());
            labels.extend_from_slice(l);
        }
        let rows = labels.len();
        (Matrix::new(rows, cols, data).expect("offsets share one width"), labels)
    }
}

/// Featurizes labeled utterances at all offsets, normalized with `stats`.
pub fn featurize_labeled(corpus: &SyntheticCorpus, metas: &[UtteranceMeta], stats: &GlobalStats) -> Result<LabeledFeatures> {
    let streams = speaker_streams(metas, |m| (&m.speaker_id, m.timestamp, &m.utterance_id));
    let streams: Vec<&Vec<&UtteranceMeta>> = streams.values().collect();
    let dim = corpus.config().raw_dim * STACK;
    let per_speaker: Vec<Vec<(Vec<f32>, Vec<u32>)>> = streams
        .par_iter()
        .map(|utts| {
            let mut cm = CausalMean::new(corpus.config().raw_dim);
            let mut out = vec![(Vec::new(), Vec::new()); STACK];
            for m in utts.iter() {
                let (raw, labels) = corpus.render(m)?;
                let normalized = cm.apply(&raw)?;
                for (o, slot) in out.iter_mut().enumerate() {
                    let stacked = stats.apply(&stack_and_subsample(&normalized, o)?)?;
                    slot.0.extend_from_slice(stacked.as_slice());
                    slot.1.extend(stack_labels(&labels, o));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut offsets = Vec::with_capacity(STACK);
    for o in 0..STACK {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for sp in &per_speaker {
            data.extend_from_slice(&sp[o].0);
            labels.extend_from_slice(&sp[o].1);
        }
        offsets.push((Matrix::new(labels.len(), dim, data)?, labels));
    }
    Ok(LabeledFeatures { offsets })
}

pub fn targets_for_shards(teacher: &ReferenceModel, shards: &[Shard], k: usize, batch: usize) -> Result<Vec<Shard>> {
    shards.par_iter().map(|s| generate_targets(teacher, s, k, batch)).collect()
}

pub fn gen_corpus_step(layout: &DataLayout, cfg: &CorpusConfig, seed: u64) -> Result<SyntheticCorpus> {
    let corpus = SyntheticCorpus::new(cfg.clone(), seed)?;
    let m = corpus.manifests();
    write_manifest(&layout.pool_manifest(), &m.pool)?;
    write_manifest(&layout.labeled_manifest(), &m.labeled)?;
    write_manifest(&layout.heldout_manifest(), &m.heldout)?;
    write_json(&layout.corpus_spec(), &CorpusSpec { seed, config: cfg.clone() })?;
    Ok(corpus)
}

pub fn load_corpus(layout: &DataLayout) -> Result<SyntheticCorpus> {
    require(&layout.corpus_spec(), "gen-corpus")?;
    let spec: CorpusSpec = read_json(&layout.corpus_spec())?;
    SyntheticCorpus::new(spec.config, spec.seed)
}

pub fn select_step(layout: &DataLayout, hours: f64, seed: u64) -> Result<Vec<UtteranceMeta>> {
    require(&layout.pool_manifest(), "gen-corpus")?;
    let selected = select_data(&read_manifest(&layout.pool_manifest())?, hours, seed)?;
    write_manifest(&layout.selected_manifest(), &selected)?;
    Ok(selected)
}

pub fn shard_step(layout: &DataLayout, shard_hours: f64) -> Result<Vec<ShardAssignment>> {
    require(&layout.selected_manifest(), "select")?;
    let corpus = load_corpus(layout)?;
    let assignments = shard_by_speaker(&read_manifest(&layout.selected_manifest())?, shard_hours)?;
    write_all(&layout.raw_dir(), &render_shards(&corpus, &assignments)?)?;
    Ok(assignments)
}

pub fn normalize_step(layout: &DataLayout, seed: u64) -> Result<GlobalStats> {
    let raw = read_all(&require_shards(&layout.raw_dir(), "shard")?)?;
    let (shards, stats) = normalize_shards(&raw, seed)?;
    write_all(&layout.norm_dir(), &shards)?;
    write_json(&layout.stats(), &stats)?;
    Ok(stats)
}

pub fn load_stats(layout: &DataLayout) -> Result<GlobalStats> {
    require(&layout.stats(), "normalize")?;
    read_json(&layout.stats())
}

/// Labeled and held-out features for a prepared data directory.
pub fn load_labeled(layout: &DataLayout) -> Result<(LabeledFeatures, LabeledFeatures)> {
    let corpus = load_corpus(layout)?;
    let stats = load_stats(layout)?;
    require(&layout.labeled_manifest(), "gen-corpus")?;
    let labeled = featurize_labeled(&corpus, &read_manifest(&layout.labeled_manifest())?, &stats)?;
    let heldout = featurize_labeled(&corpus, &read_manifest(&layout.heldout_manifest())?, &stats)?;
    Ok((labeled, heldout))
}

pub fn targets_step(layout: &DataLayout, teacher: &ReferenceModel, k: usize, batch: usize) -> Result<usize> {
    let shards = read_all(&require_shards(&layout.norm_dir(), "normalize")?)?;
    let out = targets_for_shards(teacher, &shards, k, batch)?;
    write_all(&layout.targets_dir(), &out)?;
    Ok(out.len())
}

pub fn repartition_step(layout: &DataLayout, partitions: usize) -> Result<usize> {
    let shards = read_all(&require_shards(&layout.targets_dir(), "targets")?)?;
    let parts = repartition(shards, partitions)?;
    write_all(&layout.parts_dir(), &parts)?;
    Ok(parts.len())
}
