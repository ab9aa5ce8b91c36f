//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pbam::bmuf::{bmuf_train_block, bmuf_update, derive_zeta, model_average, BmufConfig, BmufState, LocalWorker, VecBatches};
use pbam::cli::{execute, Cli, RunConfig};
use pbam::cluster::cost::{estimate_speedup, project_bmuf, project_dense, project_gtc, CostModel};
use pbam::cluster::ledger::{dense_gtc_equivalent_bytes, SyncKind};
use pbam::cluster::{probe_batch, run_training, Algorithm, TrainOutcome, TrainingData, WorkerConfig};
use pbam::datapipe::corpus::CorpusConfig;
use pbam::datapipe::features::StatsAccumulator;
use pbam::datapipe::pipeline::{
    featurize_shard, gen_corpus_step, normalize_step, repartition_step, select_step, shard_step, targets_step,
    DataLayout, PipelineConfig,
};
use pbam::datapipe::shard_file::{list_shards, read_shard};
use pbam::datapipe::Shard;
use pbam::gtc::{gradient_scaled_tau, gtc_decode, gtc_encode, GtcConfig};
use pbam::model::{
    finite_diff_check, sgd_step, softmax, GradientVector, Matrix, MiniBatch, MomentumBuffer, ParameterVector,
    ReferenceModel, Targets, Topology,
};
use pbam::recipe::{input_dim, prepare_in_memory, PreparedData, TeacherConfig};
use pbam::schedule::{build_schedule, ScheduleConfig};

type Check = std::result::Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Criterion ids given as arguments restrict the run to those criteria.
fn selected(id: usize) -> bool {
    let ids: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    ids.is_empty() || ids.contains(&id)
}

fn run_criterion(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Check) -> Option<bool> {
    if !selected(id) {
        return None;
    }
    let start = Instant::now();
    let result = f();
    let took = start.elapsed();
    let in_time = took <= limit;
    let (ok, detail) = match result {
        Ok((ok, d)) => (ok && in_time, d),
        Err(e) => (false, format!("error: {e}")),
    };
    let timing = format!("{:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs());
    let timing = if in_time { timing } else { format!("{timing} EXCEEDED") };
    println!("[{}] {id:>2} {name}: {detail} ({timing})", if ok { "PASS" } else { "FAIL" });
    Some(ok)
}

fn corpus(hours: f64) -> CorpusConfig {
    CorpusConfig { pool_hours: hours * 1.2, pool_speakers: (hours * 50.0) as usize, ..CorpusConfig::default() }
}

fn pipe(hours: f64) -> PipelineConfig {
    PipelineConfig { select_hours: hours, shard_hours: hours / 100.0, ..PipelineConfig::default() }
}

fn teacher(epochs: usize) -> TeacherConfig {
    TeacherConfig { epochs, hidden: vec![64, 64], ..TeacherConfig::default() }
}

fn student(prep: &PreparedData) -> Topology {
    let c = prep.corpus.config();
    Topology::new(input_dim(c), vec![32, 32], c.classes).unwrap()
}

fn worker_config(algo: Algorithm, workers: usize, batch: usize, tau: f32) -> WorkerConfig {
    WorkerConfig {
        workers,
        algo,
        seed: 7,
        batch_size: batch,
        momentum: 0.0,
        gtc: GtcConfig { tau, warmup_steps: 0 },
        bmuf: BmufConfig::from_c(workers, 100, 1.0).unwrap(),
        cost: CostModel::default(),
    }
}

fn train(prep: &PreparedData, data: &TrainingData, wc: &WorkerConfig, sched: &ScheduleConfig) -> Result<TrainOutcome, String> {
    let plan = build_schedule(sched, data.unlabeled.len(), data.labeled.is_some()).map_err(err)?;
    run_training(wc, &plan, data, ReferenceModel::init(student(prep), 7)).map_err(err)
}

fn rel(a: f64, base: f64) -> f64 {
    (a - base) / base
}

fn gtc_conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for call in 0..10_000 {
        let dim = rng.random_range(1..200);
        let tau = 2f32.powi(rng.random_range(-12..4));
        let scale = 2f32.powi(rng.random_range(-6..8)) * tau;
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
        let g = GradientVector::from(v.clone());
        let (update, residual) = gtc_encode(&g, &GtcConfig::new(tau).map_err(err)?).map_err(err)?;
        let decoded = gtc_decode(&update).map_err(err)?;
        for i in 0..dim {
            if decoded.values[i] + residual.0[i] != v[i] {
                return Ok((false, format!("call {call} coordinate {i}: {} + {} != {}", decoded.values[i], residual.0[i], v[i])));
            }
        }
    }
    Ok((true, "10000 random encodes reconstruct their input exactly".into()))
}

fn gtc_parity() -> Check {
    let prep = prepare_in_memory(&corpus(20.0), &pipe(20.0), &teacher(12), 7).map_err(err)?;
    let data = prep.training_data(true);
    let sched = ScheduleConfig::default();
    let base = train(&prep, &data, &worker_config(Algorithm::Plain, 1, 32, 1.0), &sched)?;
    let topo = student(&prep);
    let probe = probe_batch(&data, topo.input_dim, topo.num_classes, 32).map_err(err)?;
    let (_, g) = ReferenceModel::init(topo, 7).loss_and_gradient(&probe).map_err(err)?;
    let tau = gradient_scaled_tau(8.0, &[g]).map_err(err)?;
    let gtc = train(&prep, &data, &worker_config(Algorithm::Gtc, 8, 32, tau), &sched)?;
    let r = rel(gtc.final_accuracy(), base.final_accuracy());
    let frames: usize = prep.partitions.iter().map(Shard::frame_count).sum();
    Ok((
        r.abs() <= 0.01,
        format!(
            "{frames} frames, {} classes, tau {tau}: plain {:.4}, gtc N=8 {:.4} ({:+.2}% rel, limit 1%)",
            prep.corpus.config().classes,
            base.final_accuracy(),
            gtc.final_accuracy(),
            r * 100.0
        ),
    ))
}

fn random_params(rng: &mut ChaCha8Rng, n: usize) -> ParameterVector {
    ParameterVector::from_values((0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap()
}

fn bmuf_reductions() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Model averaging: eta = 0, zeta = 1 (C = 1/N).
    for n in [2usize, 5, 8] {
        let cfg = BmufConfig { block_size: 1, eta: 0.0, zeta: 1.0, c: 1.0 / n as f64, workers: n };
        let mut state = BmufState::new(random_params(&mut rng, 300));
        for _ in 0..5 {
            let models: Vec<ParameterVector> = (0..n).map(|_| random_params(&mut rng, 300)).collect();
            let avg = model_average(&models).map_err(err)?;
            if !bmuf_update(&mut state, &avg, &cfg).map_err(err)?.bitwise_eq(&avg) {
                return Ok((false, format!("N={n}: global model differs from the average")));
            }
        }
    }
    // SGD: N = 1, block_size = 1.
    let topo = Topology::new(6, vec![8], 4).unwrap();
    let batches: Vec<MiniBatch> = (0..300)
        .map(|_| {
            let x: Vec<f32> = (0..5 * 6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let y: Vec<u32> = (0..5).map(|_| rng.random_range(0..4)).collect();
            MiniBatch::new(Matrix::new(5, 6, x).unwrap(), Targets::Hard(y), 4).unwrap()
        })
        .collect();
    let cfg = BmufConfig::from_c(1, 1, 1.0).map_err(err)?;
    let mut plain = ReferenceModel::init(topo.clone(), 5);
    let mut buf = MomentumBuffer::zeros(plain.params().len());
    let mut state = BmufState::new(plain.params().clone());
    let mut locals = vec![LocalWorker::new(plain.clone())];
    let mut sources = vec![VecBatches::new(batches.clone())];
    for (s, b) in batches.iter().enumerate() {
        let (_, g) = plain.loss_and_gradient(b).map_err(err)?;
        sgd_step(plain.params_mut(), &g, 0.1, 0.0, &mut buf).map_err(err)?;
        bmuf_train_block(&mut locals, &mut sources, 1, 0.1, 0.0).map_err(err)?;
        let avg = model_average(&[locals[0].model.params().clone()]).map_err(err)?;
        let global = bmuf_update(&mut state, &avg, &cfg).map_err(err)?.clone();
        locals[0].restart_from(&global).map_err(err)?;
        if !global.bitwise_eq(plain.params()) {
            return Ok((false, format!("SGD reduction diverged at step {s}")));
        }
    }
    Ok((true, "averaging reduction bitwise for N in {2,5,8}; 300-step SGD trajectory bitwise".into()))
}

fn bmuf_parity() -> Check {
    let hours = 240.0;
    let prep = prepare_in_memory(&corpus(hours), &pipe(hours), &teacher(12), 7).map_err(err)?;
    let data = prep.training_data(false);
    let sched = ScheduleConfig { lr0: 0.005, decay: 0.85, interleave_labeled: false, ..ScheduleConfig::default() };
    let base = train(&prep, &data, &worker_config(Algorithm::Plain, 1, 1, 1.0), &sched)?.final_accuracy();
    let b8 = train(&prep, &data, &worker_config(Algorithm::Bmuf, 8, 1, 1.0), &sched)?.final_accuracy();
    let b32 = train(&prep, &data, &worker_config(Algorithm::Bmuf, 32, 1, 1.0), &sched)?.final_accuracy();
    let (r8, r32) = (rel(b8, base), rel(b32, base));
    Ok((
        r8.abs() <= 0.01 && r32.abs() <= 0.02,
        format!(
            "plain {base:.4}; bmuf N=8 {b8:.4} ({:+.2}% rel, limit 1%); N=32 {b32:.4} ({:+.2}% rel, limit 2%)",
            r8 * 100.0,
            r32 * 100.0
        ),
    ))
}

fn zeta_coupling() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = rng.random_range(1.0..16.0);
        let n = rng.random_range(1..=256usize);
        let eta = rng.random_range(0.0..1.0);
        let zeta = derive_zeta(c, n, eta).map_err(err)?;
        let cfg = BmufConfig::with_eta(n, 100, c, eta).map_err(err)?;
        worst = worst.max((zeta - c * n as f64 * (1.0 - eta)).abs()).max((cfg.zeta - zeta).abs());
        let back = zeta / (n as f64 * (1.0 - eta));
        worst = worst.max((back - c).abs() / c);
    }
    Ok((worst < 1e-6, format!("1000 random (C, N, eta) triples, worst deviation {worst:.2e} (limit 1e-6)")))
}

fn comm_accounting() -> Check {
    let prep = prepare_in_memory(&corpus(4.0), &PipelineConfig { partitions: 64, ..pipe(4.0) }, &teacher(4), 7)
        .map_err(err)?;
    let data = prep.training_data(false);
    let sched = ScheduleConfig { sub_epochs: 2, finetune_from: 2, interleave_labeled: false, ..ScheduleConfig::default() };
    let params = student(&prep).param_count() as u64;
    let n = 8usize;

    let gtc = train(&prep, &data, &worker_config(Algorithm::Gtc, n, 8, 1.0 / 16.0), &sched)?;
    let peers = n as u64 - 1;
    let bad = gtc
        .ledger
        .syncs()
        .iter()
        .filter(|s| s.kind != SyncKind::Gtc || s.bytes != (4 * s.words + 16 * n as u64) * peers)
        .count();

    let bmuf = train(&prep, &data, &worker_config(Algorithm::Bmuf, n, 8, 1.0), &sched)?;
    let expected_syncs = bmuf.steps.div_ceil(100);
    let dense_equiv = bmuf.steps * dense_gtc_equivalent_bytes(params, n);
    let ratio = dense_equiv as f64 / bmuf.ledger.bytes_total() as f64;
    let ok = bad == 0
        && gtc.ledger.sync_count() == gtc.steps
        && bmuf.ledger.sync_count() == expected_syncs
        && ratio >= 10.0
        && gtc.ledger.is_balanced()
        && bmuf.ledger.is_balanced();
    Ok((
        ok,
        format!(
            "gtc: {} syncs, {bad} off the 4*words+16 per-peer rule; bmuf: {} syncs for {} mini-batches (expect {expected_syncs}), dense-GTC/BMUF bytes {ratio:.0}x (limit 10x)",
            gtc.ledger.sync_count(),
            bmuf.ledger.sync_count(),
            bmuf.steps
        ),
    ))
}

fn speedup_ordering() -> Check {
    let params = 24_000_000u64;
    let steps = 10_000u64;
    let density = 0.01;
    let cost = CostModel::default();
    let speedups = |cost: &CostModel, n: usize| {
        let mb = steps * n as u64;
        (
            estimate_speedup(&project_dense(params, n, steps), cost, n, mb),
            estimate_speedup(&project_gtc(params, density, n, steps), cost, n, mb),
            estimate_speedup(&project_bmuf(params, n, 100, steps), cost, n, mb),
        )
    };
    let (dense, gtc, bmuf) = speedups(&cost, 64);
    let contended = CostModel { contention_exponent: 1.0, ..cost.clone() };
    let (_, gtc32, _) = speedups(&contended, 32);
    let (_, gtc64, _) = speedups(&contended, 64);
    Ok((
        bmuf > gtc && gtc > dense && gtc64 < gtc32,
        format!(
            "N=64: bmuf {bmuf:.2} > gtc {gtc:.2} > dense {dense:.2}; contended gtc N=32 {gtc32:.2}, N=64 {gtc64:.2}"
        ),
    ))
}

fn record_ids(shards: &[Shard]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in shards {
        for r in &s.records {
            *m.entry(r.utterance_id.clone()).or_insert(0) += 1;
        }
    }
    m
}

fn read_dir_shards(dir: &Path) -> Result<Vec<Shard>, String> {
    list_shards(dir).map_err(err)?.iter().map(|p| read_shard(p).map_err(err)).collect()
}

fn pipeline_conservation() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let layout = DataLayout::new(tmp.path());
    let cfg = CorpusConfig { pool_hours: 3.0, pool_speakers: 120, ..CorpusConfig::default() };
    gen_corpus_step(&layout, &cfg, 7).map_err(err)?;
    let selected = select_step(&layout, 2.0, 7).map_err(err)?;
    shard_step(&layout, 0.05).map_err(err)?;
    normalize_step(&layout, 7).map_err(err)?;
    let teacher = ReferenceModel::init(Topology::new(cfg.raw_dim * 3, vec![16], cfg.classes).unwrap(), 3);
    targets_step(&layout, &teacher, 20, 256).map_err(err)?;
    repartition_step(&layout, 30).map_err(err)?;

    let mut want = BTreeMap::new();
    for u in &selected {
        *want.entry(u.utterance_id.clone()).or_insert(0) += 1;
    }
    let raw = read_dir_shards(&layout.raw_dir())?;
    let norm = read_dir_shards(&layout.norm_dir())?;
    let targets = read_dir_shards(&layout.targets_dir())?;
    let parts = read_dir_shards(&layout.parts_dir())?;
    let stages = [("raw", &raw), ("norm", &norm), ("targets", &targets), ("parts", &parts)];
    let mut preserved = true;
    for (_, s) in &stages {
        preserved &= record_ids(s) == want;
    }
    let frames = |s: &[Shard]| s.iter().map(Shard::frame_count).sum::<usize>();
    preserved &= frames(&norm) == frames(&targets) && frames(&targets) == frames(&parts);

    let dim = norm[0].records[0].frames.cols();
    let mut pooled = StatsAccumulator::new(dim);
    for s in &norm {
        for r in &s.records {
            pooled.add(&r.frames).map_err(err)?;
        }
    }
    let post = pooled.finalize().map_err(err)?;
    let max_mean = post.mean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_var = post.variance.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));

    let featurized: Vec<Shard> = raw.iter().map(featurize_shard).collect::<pbam::Result<_>>().map_err(err)?;
    let mut single = StatsAccumulator::new(dim);
    let mut merged = StatsAccumulator::new(dim);
    for s in &featurized {
        let mut acc = StatsAccumulator::new(dim);
        for r in &s.records {
            single.add(&r.frames).map_err(err)?;
            acc.add(&r.frames).map_err(err)?;
        }
        merged.merge(&acc).map_err(err)?;
    }
    let (a, b) = (single.finalize().map_err(err)?, merged.finalize().map_err(err)?);
    let mut max_rel = 0.0f64;
    for (x, y) in a.mean.iter().chain(&a.variance).zip(b.mean.iter().chain(&b.variance)) {
        max_rel = max_rel.max((x - y).abs() / x.abs().max(1e-300));
    }
    Ok((
        preserved && max_mean < 1e-5 && max_var < 1e-4 && max_rel < 1e-9 && a.frames == b.frames,
        format!(
            "{} utterances through 4 stages, multisets preserved: {preserved}; |mean| {max_mean:.1e} (limit 1e-5), |var-1| {max_var:.1e} (limit 1e-4), merged vs single-pass {max_rel:.1e} (limit 1e-9)",
            selected.len()
        ),
    ))
}

/// Mean share of softmax mass held by the top `k` classes, for every `k`.
fn topk_coverage(teacher: &ReferenceModel, shards: &[Shard], classes: usize) -> Result<Vec<f64>, String> {
    let mut cover = vec![0.0f64; classes + 1];
    let mut frames = 0usize;
    for s in shards {
        for r in &s.records {
            if r.frames.rows() == 0 {
                continue;
            }
            let logits = teacher.forward(&r.frames).map_err(err)?;
            for i in 0..logits.rows() {
                let mut p: Vec<f64> = softmax(logits.row(i)).into_iter().map(f64::from).collect();
                p.sort_by(|a, b| b.total_cmp(a));
                let mut acc = 0.0;
                for (k, v) in p.iter().enumerate() {
                    acc += v;
                    cover[k + 1] += acc;
                }
                frames += 1;
            }
        }
    }
    Ok(cover.into_iter().map(|c| c / frames.max(1) as f64).collect())
}

fn topk_fidelity() -> Check {
    let p = pipe(20.0);
    let prep = prepare_in_memory(&corpus(20.0), &p, &teacher(12), 7).map_err(err)?;
    let classes = prep.corpus.config().classes;
    let cover = topk_coverage(&prep.teacher, &prep.shards, classes)?;
    let k = (1..=classes).find(|&k| cover[k] >= 0.99).unwrap_or(classes);
    let sched = ScheduleConfig::default();
    let wc = worker_config(Algorithm::Plain, 1, 32, 1.0);
    let topk = train(&prep, &prep.with_k(k, &p).map_err(err)?.training_data(true), &wc, &sched)?.final_accuracy();
    let full = train(&prep, &prep.with_k(classes, &p).map_err(err)?.training_data(true), &wc, &sched)?.final_accuracy();
    let gap = (topk - full).abs();
    Ok((
        gap <= 0.005,
        format!(
            "k={k} covers {:.2}% mass; top-k student {topk:.4} vs full {full:.4}, gap {:.3}% abs (limit 0.5%)",
            cover[k] * 100.0,
            gap * 100.0
        ),
    ))
}

fn distillation_sanity() -> Check {
    let prep = prepare_in_memory(&corpus(20.0), &pipe(20.0), &teacher(2), 7).map_err(err)?;
    let wc = worker_config(Algorithm::Plain, 1, 32, 1.0);
    let eval = prep.training_data(false).eval;
    let random = ReferenceModel::init(student(&prep), 7).accuracy(&eval.frames, &eval.labels).map_err(err)?;
    let on = ScheduleConfig::default();
    let off = ScheduleConfig { interleave_labeled: false, ..on.clone() };
    let interleaved = train(&prep, &prep.training_data(true), &wc, &on)?.final_accuracy();
    let ablation = train(&prep, &prep.training_data(false), &wc, &off)?.final_accuracy();
    Ok((
        interleaved - random >= 0.20 && interleaved >= ablation,
        format!(
            "teacher {:.4}; random init {random:.4}; scheduled student {interleaved:.4} (+{:.1} pts, limit 20); unlabeled-only {ablation:.4}",
            prep.teacher_accuracy,
            (interleaved - random) * 100.0
        ),
    ))
}

fn snapshot(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(root).map_err(err)?.display().to_string();
                out.insert(key, std::fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn cli_session(config: &Path, out: &Path) -> Result<Vec<String>, String> {
    let c = config.to_str().unwrap();
    let o = out.to_str().unwrap();
    let commands: &[&[&str]] = &[
        &["pipeline", "gen-corpus"],
        &["pipeline", "select"],
        &["pipeline", "shard"],
        &["pipeline", "normalize"],
        &["teacher"],
        &["pipeline", "targets"],
        &["pipeline", "repartition"],
        &["train"],
        &["train", "--algo", "gtc", "--workers", "4", "--tau", "8", "--tau-scale", "rms"],
        &["train", "--algo", "bmuf", "--workers", "4", "--block-size", "20", "--C", "1"],
        &["report", "--json"],
    ];
    let mut stdout = Vec::new();
    for args in commands {
        let head = ["pbam", "--config", c, "--out", o];
        let argv = head.iter().chain(args.iter()).copied();
        let cli = Cli::try_parse_from(argv).map_err(err)?;
        stdout.push(execute(&cli).map_err(|e| format!("{args:?}: {e}"))?.replace(o, "<out>"));
    }
    Ok(stdout)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut cfg = RunConfig::default();
    cfg.corpus = CorpusConfig {
        pool_hours: 1.5,
        pool_speakers: 60,
        labeled_hours: 0.3,
        labeled_speakers: 12,
        heldout_hours: 0.1,
        heldout_speakers: 5,
        ..CorpusConfig::default()
    };
    cfg.pipeline = PipelineConfig { select_hours: 1.0, shard_hours: 0.05, partitions: 24, ..PipelineConfig::default() };
    cfg.teacher.epochs = 3;
    cfg.schedule.sub_epochs = 3;
    cfg.schedule.finetune_from = 3;
    cfg.trainer.batch_size = 16;
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, cfg.to_toml().map_err(err)?).map_err(err)?;

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out_a = cli_session(&config, &a)?;
    let first = snapshot(&a)?;
    let rerun = cli_session(&config, &a)?;
    let second = snapshot(&a)?;
    std::env::set_var(pbam::cluster::THREADS_ENV, "1");
    let other = cli_session(&config, &b);
    std::env::remove_var(pbam::cluster::THREADS_ENV);
    let other_snap = snapshot(&b)?;
    let other = other?;

    let same = first == second && first == other_snap && out_a == rerun && out_a == other;
    let differing: Vec<&String> = first.keys().filter(|k| second.get(*k) != first.get(*k) || other_snap.get(*k) != first.get(*k)).collect();
    Ok((
        same && !first.is_empty(),
        format!(
            "{} files across pipeline, teacher, 3 trainers and report; rerun in place and fresh single-thread run byte-identical: {same}{}",
            first.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {differing:?})") }
        ),
    ))
}

fn gradient_check() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = rng.random_range(2..8);
        let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(2..9)).collect();
        let classes = rng.random_range(2..6);
        let model = ReferenceModel::init(Topology::new(input, hidden, classes).unwrap(), seed);
        let rows = rng.random_range(1..9);
        let x = Matrix::new(rows, input, (0..rows * input).map(|_| rng.random_range(-1.5f32..1.5)).collect()).unwrap();
        let targets = if seed % 2 == 0 {
            Targets::Hard((0..rows).map(|_| rng.random_range(0..classes as u32)).collect())
        } else {
            let logits: Vec<f32> = (0..rows * classes).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let p: Vec<f32> = logits.chunks(classes).flat_map(softmax).collect();
            Targets::Soft(Matrix::new(rows, classes, p).unwrap())
        };
        let batch = MiniBatch::new(x, targets, classes).map_err(err)?;
        worst = worst.max(finite_diff_check(&model, &batch, 1e-5).map_err(err)?);
    }
    Ok((worst < 1e-3, format!("10 seeds, worst relative error {worst:.2e} (limit 1e-3)")))
}

fn main() -> ExitCode {
    let mins = |m: u64| Duration::from_secs(60 * m);
    let secs = Duration::from_secs;
    let results = [
        run_criterion(1, "gtc conservation", secs(10), gtc_conservation),
        run_criterion(2, "gtc parity", mins(5), gtc_parity),
        run_criterion(3, "bmuf reductions", mins(1), bmuf_reductions),
        run_criterion(4, "bmuf parity", mins(5), bmuf_parity),
        run_criterion(5, "block momentum coupling", mins(1), zeta_coupling),
        run_criterion(6, "communication accounting", mins(5), comm_accounting),
        run_criterion(7, "speedup model ordering", mins(1), speedup_ordering),
        run_criterion(8, "pipeline conservation", mins(5), pipeline_conservation),
        run_criterion(9, "top-k fidelity", mins(10), topk_fidelity),
        run_criterion(10, "distillation sanity", mins(10), distillation_sanity),
        run_criterion(11, "determinism", mins(10), determinism),
        run_criterion(12, "gradient check", mins(1), gradient_check),
    ];
    let ran: Vec<bool> = results.into_iter().flatten().collect();
    let passed = ran.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", ran.len());
    if passed == ran.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
