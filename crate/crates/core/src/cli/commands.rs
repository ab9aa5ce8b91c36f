use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, TauScale};
use super::PipelineStep;
use crate::cluster::cost::CostModel;
use crate::cluster::{probe_batch, run_training, Algorithm, MetricRecord, ShardRef, TrainingData};
use crate::datapipe::corpus::CorpusConfig;
use crate::datapipe::pipeline::{
    gen_corpus_step, load_labeled, normalize_step, repartition_step, require_shards, select_step, shard_step,
    targets_step, DataLayout, PipelineConfig,
};
use crate::datapipe::shard_file::list_shards;
use crate::error::{Error, Result};
use crate::fsutil::{from_json_lines, read_json, to_json_lines, write_atomic, write_json};
use crate::gtc::gradient_scaled_tau;
use crate::model::{ReferenceModel, Topology};
use crate::model_file::{load_model, save_model};
use crate::recipe::{eval_set, input_dim, train_teacher, TeacherConfig};
use crate::schedule::{build_schedule, ScheduleConfig};

pub fn pipeline(cfg: &RunConfig, step: PipelineStep) -> Result<String> {
    let layout = DataLayout::new(cfg.data_dir());
    let pipe = &cfg.pipeline;
    Ok(match step {
        PipelineStep::GenCorpus => {
            let m = gen_corpus_step(&layout, &cfg.corpus, cfg.seed)?.manifests();
            format!(
                "gen-corpus: {} pool, {} labeled, {} held-out utterances\n",
                m.pool.len(),
                m.labeled.len(),
                m.heldout.len()
            )
        }
        PipelineStep::Select => {
            let sel = select_step(&layout, pipe.select_hours, cfg.seed)?;
            let hours: f64 = sel.iter().map(|u| u.duration_s).sum::<f64>() / 3600.0;
            format!("select: {} utterances, {hours:.3} h\n", sel.len())
        }
        PipelineStep::Shard => {
            let a = shard_step(&layout, pipe.shard_hours)?;
            let oversized = a.iter().filter(|s| s.oversized).count();
            format!("shard: {} shards ({oversized} oversized)\n", a.len())
        }
        PipelineStep::Normalize => {
            let stats = normalize_step(&layout, cfg.seed)?;
            format!("normalize: {} frames of dim {}\n", stats.frames, stats.mean.len())
        }
        PipelineStep::Targets => {
            require_shards(&layout.norm_dir(), "normalize")?;
            let teacher = load_teacher(&layout)?;
            let n = targets_step(&layout, &teacher, pipe.k, pipe.target_batch)?;
            format!("targets: {n} shards, k={}\n", pipe.k)
        }
        PipelineStep::Repartition => {
            let n = repartition_step(&layout, pipe.partitions)?;
            format!("repartition: {n} partitions\n")
        }
    })
}

fn load_teacher(layout: &DataLayout) -> Result<ReferenceModel> {
    let path = layout.teacher();
    if !path.exists() {
        return Err(Error::missing(&path, "run `pbam teacher` first"));
    }
    load_model(&path)
}

pub fn teacher(cfg: &RunConfig) -> Result<String> {
    let layout = DataLayout::new(cfg.data_dir());
    let (labeled, heldout) = load_labeled(&layout)?;
    let run = train_teacher(&labeled, &heldout, cfg.corpus.classes, &cfg.teacher, cfg.seed)?;
    save_model(&layout.teacher(), &run.model)?;
    write_atomic(&layout.root.join("teacher-metrics.jsonl"), &to_json_lines(&run.metrics)?)?;
    Ok(format!("teacher: held-out accuracy {:.4}\n", run.final_accuracy()))
}

/// Settings the prepared data directory was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PrepStamp {
    seed: u64,
    corpus: CorpusConfig,
    pipeline: PipelineConfig,
    teacher: TeacherConfig,
}

fn stamp_path(layout: &DataLayout) -> PathBuf {
    layout.root.join("prepared.json")
}

/// Runs the whole pipeline and the teacher unless the data directory was
/// already prepared from identical settings.
pub fn ensure_prepared(cfg: &RunConfig) -> Result<bool> {
    let layout = DataLayout::new(cfg.data_dir());
    let stamp = PrepStamp {
        seed: cfg.seed,
        corpus: cfg.corpus.clone(),
        pipeline: cfg.pipeline.clone(),
        teacher: cfg.teacher.clone(),
    };
    let path = stamp_path(&layout);
    if path.exists() && layout.parts_dir().exists() {
        if let Ok(old) = read_json::<PrepStamp>(&path) {
            if old == stamp && !list_shards(&layout.parts_dir())?.is_empty() {
                return Ok(false);
            }
        }
    }
    if path.exists() {
        std::fs::remove_file(&path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    }
    for step in [PipelineStep::GenCorpus, PipelineStep::Select, PipelineStep::Shard, PipelineStep::Normalize] {
        let done = pipeline(cfg, step)?;
        log::info!("{}", done.trim_end());
    }
    let done = teacher(cfg)?;
    log::info!("{}", done.trim_end());
    for step in [PipelineStep::Targets, PipelineStep::Repartition] {
        let done = pipeline(cfg, step)?;
        log::info!("{}", done.trim_end());
    }
    write_json(&path, &stamp)?;
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtcHeader {
    pub tau: f32,
    pub tau_scale: TauScale,
    pub tau_effective: f32,
    pub warmup_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmufHeader {
    pub block_size: usize,
    pub eta: f64,
    pub zeta: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

/// `header.json` of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub algo: Algorithm,
    #[serde(rename = "N")]
    pub workers: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub momentum: f32,
    pub hidden: Vec<usize>,
    pub param_count: usize,
    pub partitions: usize,
    pub gtc: Option<GtcHeader>,
    pub bmuf: Option<BmufHeader>,
    pub schedule: ScheduleConfig,
    pub cost: CostModel,
    pub steps: u64,
    pub minibatches: u64,
    pub final_accuracy: f64,
}

pub fn train(cfg: &RunConfig) -> Result<String> {
    ensure_prepared(cfg)?;
    let layout = DataLayout::new(cfg.data_dir());
    let parts: Vec<ShardRef> = list_shards(&layout.parts_dir())?.into_iter().map(ShardRef::File).collect();
    let (labeled, heldout) = load_labeled(&layout)?;
    let with_labeled = cfg.schedule.interleave_labeled && !labeled.is_empty();
    let data = TrainingData::new(parts, with_labeled.then_some(labeled), eval_set(&heldout));
    let t = &cfg.trainer;
    let topology = Topology::new(input_dim(&cfg.corpus), t.hidden.clone(), cfg.corpus.classes)?;
    let init = ReferenceModel::init(topology.clone(), cfg.seed);
    let plan = build_schedule(&cfg.schedule, data.unlabeled.len(), with_labeled)?;

    let tau = match t.tau_scale {
        TauScale::Raw => t.tau,
        TauScale::Rms => {
            let batch = probe_batch(&data, topology.input_dim, topology.num_classes, t.batch_size)?;
            let (_, g) = init.loss_and_gradient(&batch)?;
            gradient_scaled_tau(t.tau, &[g])?
        }
    };
    let wc = t.worker_config(cfg.seed, tau, &cfg.cost)?;
    let outcome = run_training(&wc, &plan, &data, init)?;

    let dir = cfg.run_dir();
    save_model(&dir.join("model.pbmd"), &outcome.model)?;
    write_atomic(&dir.join("metrics.jsonl"), &to_json_lines(&outcome.metrics)?)?;
    write_json(&dir.join("ledger.json"), &outcome.ledger)?;
    write_atomic(&dir.join("schedule.jsonl"), &plan.to_jsonl()?)?;
    let header = RunHeader {
        algo: t.algo,
        workers: t.workers,
        seed: cfg.seed,
        batch_size: t.batch_size,
        momentum: t.momentum,
        hidden: t.hidden.clone(),
        param_count: topology.param_count(),
        partitions: data.unlabeled.len(),
        gtc: (t.algo == Algorithm::Gtc).then_some(GtcHeader {
            tau: t.tau,
            tau_scale: t.tau_scale,
            tau_effective: tau,
            warmup_steps: t.warmup_steps,
        }),
        bmuf: (t.algo == Algorithm::Bmuf).then_some(BmufHeader {
            block_size: wc.bmuf.block_size,
            eta: wc.bmuf.eta,
            zeta: wc.bmuf.zeta,
            c: wc.bmuf.c,
        }),
        schedule: cfg.schedule.clone(),
        cost: cfg.cost.clone(),
        steps: outcome.steps,
        minibatches: outcome.minibatches,
        final_accuracy: outcome.final_accuracy(),
    };
    write_json(&dir.join("header.json"), &header)?;
    Ok(format!(
        "train: {} N={} accuracy {:.4}, {} syncs, {} bytes -> {}\n",
        t.algo,
        t.workers,
        outcome.final_accuracy(),
        outcome.ledger.sync_count(),
        outcome.ledger.bytes_total(),
        dir.display()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub algo: Algorithm,
    #[serde(rename = "N")]
    pub workers: usize,
    pub accuracy: f64,
    /// Percent change against the plain single-worker run; absent without one.
    pub relative_accuracy_pct: Option<f64>,
    pub bytes_total: u64,
    pub syncs: u64,
    pub predicted_speedup: f64,
}

/// One row per run from its header and the last metrics record.
pub fn report_rows(run_dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let header_path = dir.join("header.json");
        let metrics_path = dir.join("metrics.jsonl");
        for p in [&header_path, &metrics_path] {
            if !p.exists() {
                return Err(Error::missing(p, "run `pbam train` for this run first"));
            }
        }
        let header: RunHeader = read_json(&header_path)?;
        let metrics: Vec<MetricRecord> = from_json_lines(&metrics_path)?;
        let last = metrics
            .last()
            .ok_or_else(|| Error::Parse { what: metrics_path.display().to_string(), reason: "no records".into() })?;
        rows.push(ReportRow {
            run: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            algo: header.algo,
            workers: header.workers,
            accuracy: last.accuracy,
            relative_accuracy_pct: None,
            bytes_total: last.bytes_total,
            syncs: last.syncs,
            predicted_speedup: last.predicted_speedup,
        });
    }
    rows.sort_by(|a, b| (a.algo, a.workers, &a.run).cmp(&(b.algo, b.workers, &b.run)));
    let base = rows.iter().find(|r| r.algo == Algorithm::Plain && r.workers == 1).map(|r| r.accuracy);
    if base.is_none() {
        log::warn!("report: no plain N=1 run, relative accuracy omitted");
    }
    for r in &mut rows {
        r.relative_accuracy_pct = base.filter(|b| *b > 0.0).map(|b| (r.accuracy - b) / b * 100.0);
    }
    Ok(rows)
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let header = ["run", "algo", "N", "accuracy", "rel_acc_%", "bytes_total", "syncs", "speedup"];
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.run.clone(),
                r.algo.to_string(),
                r.workers.to_string(),
                format!("{:.4}", r.accuracy),
                r.relative_accuracy_pct.map_or("-".to_string(), |v| format!("{v:+.2}")),
                r.bytes_total.to_string(),
                r.syncs.to_string(),
                format!("{:.2}", r.predicted_speedup),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        for (i, (c, w)) in row.iter().zip(&widths).enumerate() {
            let sep = if i + 1 == row.len() { "\n" } else { "  " };
            if i < 2 {
                let _ = write!(out, "{c:<w$}{sep}");
            } else {
                let _ = write!(out, "{c:>w$}{sep}");
            }
        }
    };
    line(&mut out, &header);
    for row in &cells {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

fn default_runs(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.runs_dir();
    if !dir.exists() {
        return Err(Error::missing(&dir, "run `pbam train` first"));
    }
    let mut runs = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })? {
        let p = entry.map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?.path();
        if p.join("metrics.jsonl").exists() {
            runs.push(p);
        }
    }
    runs.sort();
    Ok(runs)
}

pub fn report(cfg: &RunConfig, runs: &[PathBuf], json: bool) -> Result<String> {
    let runs = if runs.is_empty() { default_runs(cfg)? } else { runs.to_vec() };
    let rows = report_rows(&runs)?;
    if json {
        let mut s = serde_json::to_string_pretty(&rows)
            .map_err(|e| Error::Parse { what: "report".into(), reason: e.to_string() })?;
        s.push('\n');
        Ok(s)
    } else {
        Ok(render_table(&rows))
    }
}
