use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;

use pbam::bmuf::{bmuf_update, derive_zeta, model_average, BmufConfig, BmufState};
use pbam::datapipe::features::StatsAccumulator;
use pbam::datapipe::manifest::UtteranceMeta;
use pbam::datapipe::shard_file::{decode_shard, encode_shard};
use pbam::datapipe::sharding::{repartition, shard_by_speaker};
use pbam::datapipe::topk::{encode_topk, TopKTargets};
use pbam::datapipe::{Record, Shard};
use pbam::model::{Matrix, ParameterVector};
use pbam::schedule::{build_schedule, EventKind, ScheduleConfig};

fn metas(durations: &[(u8, f64)]) -> Vec<UtteranceMeta> {
    durations
        .iter()
        .enumerate()
        .map(|(i, &(spk, d))| UtteranceMeta {
            utterance_id: format!("u{i}"),
            speaker_id: format!("s{spk}"),
            duration_s: d,
            timestamp: 1000 + i as u64,
            locator: format!("synth:{spk}:{i}"),
        })
        .collect()
}

fn shard_strategy() -> impl Strategy<Value = Shard> {
    any::<bool>().prop_flat_map(|with_targets| {
        prop::collection::vec(record_strategy(with_targets), 0..6)
            .prop_map(|records| Shard { name: "shard-00000".into(), records })
    })
}

fn record_strategy(with_targets: bool) -> impl Strategy<Value = Record> {
    (1usize..6, 0usize..5, any::<u64>()).prop_map(move |(dim, rows, seed)| {
        let data: Vec<f32> = (0..rows * dim).map(|i| ((seed as usize + i * 7919) % 1000) as f32 / 37.0 - 13.0).collect();
        let targets = with_targets.then(|| {
            let indices: Vec<u32> = (0..rows).flat_map(|_| [1u32, 4]).collect();
            let logits: Vec<f32> = (0..rows * 2).map(|i| i as f32 * 0.5 - 1.0).collect();
            TopKTargets::new(2, indices, logits).unwrap()
        });
        Record {
            utterance_id: format!("utt-{seed}"),
            speaker_id: format!("spk-{}", seed % 7),
            timestamp: seed % 100_000,
            frames: Matrix::new(rows, dim, data).unwrap(),
            targets,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn speakers_never_split(utts in prop::collection::vec((0u8..20, 1.0f64..400.0), 1..120), target in 0.05f64..1.0) {
        let metas = metas(&utts);
        let shards = shard_by_speaker(&metas, target).unwrap();
        let mut home: BTreeMap<String, String> = BTreeMap::new();
        let mut seen = 0;
        for s in &shards {
            for u in &s.utterances {
                seen += 1;
                let prev = home.insert(u.speaker_id.clone(), s.name.clone());
                prop_assert!(prev.is_none() || prev.as_ref() == Some(&s.name));
            }
        }
        prop_assert_eq!(seen, metas.len());
    }

    #[test]
    fn shard_files_roundtrip(shard in shard_strategy()) {
        let bytes = encode_shard(&shard).unwrap();
        let back = decode_shard(&shard.name, Path::new("mem"), &bytes).unwrap();
        prop_assert_eq!(back, shard);
    }

    #[test]
    fn repartition_keeps_record_order(shard in shard_strategy(), target in 1usize..5) {
        let ids: Vec<String> = shard.records.iter().map(|r| r.utterance_id.clone()).collect();
        let parts = repartition(vec![shard], target).unwrap();
        let after: Vec<String> = parts.iter().flat_map(|p| p.records.iter().map(|r| r.utterance_id.clone())).collect();
        prop_assert_eq!(after, ids);
    }

    #[test]
    fn topk_keeps_the_largest(logits in prop::collection::vec(-20.0f32..20.0, 1..40), k in 1usize..50) {
        let row = encode_topk(&logits, k).unwrap();
        let kept = k.min(logits.len());
        prop_assert_eq!(row.indices.len(), kept);
        let min_kept = row.logits.iter().copied().fold(f32::INFINITY, f32::min);
        for (i, &v) in logits.iter().enumerate() {
            if !row.indices.contains(&(i as u32)) {
                prop_assert!(v <= min_kept);
            }
        }
    }

    #[test]
    fn stats_merge_is_order_free(chunks in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 3..=3), 2..40), split in 1usize..39) {
        let split = split.min(chunks.len() - 1);
        let rows = |c: &[Vec<f32>]| Matrix::new(c.len(), 3, c.concat()).unwrap();
        let mut single = StatsAccumulator::new(3);
        single.add(&rows(&chunks)).unwrap();
        let (mut a, mut b) = (StatsAccumulator::new(3), StatsAccumulator::new(3));
        a.add(&rows(&chunks[..split])).unwrap();
        b.add(&rows(&chunks[split..])).unwrap();
        b.merge(&a).unwrap();
        let (x, y) = (single.finalize().unwrap(), b.finalize().unwrap());
        prop_assert_eq!(x.frames, y.frames);
        for (p, q) in x.mean.iter().chain(&x.variance).zip(y.mean.iter().chain(&y.variance)) {
            prop_assert!((p - q).abs() <= 1e-9 * p.abs().max(1e-6));
        }
    }

    #[test]
    fn schedule_visits_each_partition_once(parts in 1usize..300, s in 1usize..20, labeled in any::<bool>()) {
        let cfg = ScheduleConfig { sub_epochs: s, finetune_from: s, ..ScheduleConfig::default() };
        let plan = build_schedule(&cfg, parts, labeled).unwrap();
        let mut next = 0;
        let mut last_lr = f64::INFINITY;
        for e in &plan.events {
            if let EventKind::Unlabeled { start, end } = e.kind {
                prop_assert_eq!(start, next);
                next = end;
                prop_assert!(e.lr < last_lr);
                last_lr = e.lr;
            }
        }
        prop_assert_eq!(next, parts);
    }

    #[test]
    fn zeta_follows_c(c in 1.0f64..20.0, n in 1usize..512, eta in 0.0f64..0.999) {
        let z = derive_zeta(c, n, eta).unwrap();
        prop_assert!((z - c * n as f64 * (1.0 - eta)).abs() < 1e-6);
        prop_assert!((BmufConfig::with_eta(n, 100, c, eta).unwrap().zeta - z).abs() < 1e-12);
    }

    #[test]
    fn plain_averaging_is_a_bmuf_special_case(vals in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 16..=16), 1..8)) {
        let n = vals.len();
        let models: Vec<ParameterVector> = vals.into_iter().map(|v| ParameterVector::from_values(v).unwrap()).collect();
        let cfg = BmufConfig { block_size: 1, eta: 0.0, zeta: 1.0, c: 1.0 / n as f64, workers: n };
        let mut state = BmufState::new(ParameterVector::from_values(vec![0.5; 16]).unwrap());
        let avg = model_average(&models).unwrap();
        prop_assert!(bmuf_update(&mut state, &avg, &cfg).unwrap().bitwise_eq(&avg));
    }
}
