mod common;

use proptest::prelude::*;
use stridesense::dataset::{
    load_manifest, split_partitions, AgeRange, Partition, RunnerProfile, Segment, Sex, DEFAULT_RATIOS,
};
use stridesense::evaluation::{report_from_pairs, Pair};
use stridesense::features::{stft, StftConfig};
use stridesense::model::{build_cnn14, embedding_extent, ModelConfig, Standardization};
use stridesense::nn::{Graph, Mode, Tensor};
use stridesense::synth::{generate_corpus, DemographicsPlan, SynthConfig};
use stridesense::training::ccc;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stft_frame_count(n in 512usize..200_000) {
        let cfg = StftConfig::default();
        let spec = stft(&vec![0.0f32; n], &cfg).unwrap();
        prop_assert_eq!(spec.n_frames, 1 + (n - 512) / 160);
        prop_assert_eq!(cfg.n_frames(n), Some(spec.n_frames));
    }

    #[test]
    fn pooled_time_extent_follows_floor_halving(t in 64usize..4000) {
        let mut expected = t;
        for _ in 0..5 {
            expected /= 2;
        }
        expected -= 1;
        prop_assert_eq!(embedding_extent(t), Some(expected));

        // the same chain of pools run through the graph
        let mut g: Graph<f32> = Graph::new(&[], Mode::Eval, 0);
        let mut x = g.input(Tensor::zeros(vec![1, 1, t, 64]));
        for stride in [2, 2, 2, 2, 2, 1] {
            x = g.max_pool2d(x, stride).unwrap();
        }
        prop_assert_eq!(g.shape(x)[2], expected);
    }

    #[test]
    fn ccc_is_bounded_and_symmetric(
        xs in prop::collection::vec(-50.0f64..50.0, 2..64),
        seed in any::<u64>(),
    ) {
        let mut r = common::rng(seed);
        let ys = common::uniform_vec(&mut r, xs.len(), -50.0, 50.0);
        let a = ccc(&xs, &ys).unwrap();
        let b = ccc(&ys, &xs).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.abs() <= 1.0 + 1e-6);
    }

    #[test]
    fn test_partition_never_shares_a_session(
        sessions in prop::collection::vec(1usize..12, 3..40),
        seed in any::<u64>(),
    ) {
        let segments = fake_segments(&sessions);
        let split = split_partitions(&segments, DEFAULT_RATIOS, seed).unwrap();
        prop_assert!(split.test_is_session_disjoint(&segments));
        let total: usize = Partition::ALL.iter().map(|p| split.count(*p)).sum();
        prop_assert_eq!(total, segments.len());
        for p in Partition::ALL {
            prop_assert!(split.count(p) > 0);
        }
    }

    #[test]
    fn strata_and_runners_are_count_weighted_means(
        rows in prop::collection::vec((0usize..10, 6.0f64..20.0, 6.0f64..20.0), 1..200),
    ) {
        let profiles = profiles(10);
        let pairs: Vec<Pair> = rows
            .iter()
            .enumerate()
            .map(|(i, (r, p, t))| Pair {
                segment_id: format!("seg{i:04}"),
                runner_id: profiles[*r].runner_id.clone(),
                prediction: *p,
                target: *t,
            })
            .collect();
        let report = report_from_pairs(pairs, &profiles).unwrap();
        let n = report.pairs.len();
        let strata: f64 = report.strata.iter().map(|s| s.mae * s.count as f64).sum::<f64>() / n as f64;
        let runners: f64 = report.per_runner.iter().map(|s| s.mae * s.count as f64).sum::<f64>() / n as f64;
        prop_assert!((strata - report.global_mae).abs() < 1e-9);
        prop_assert!((runners - report.global_mae).abs() < 1e-9);
        prop_assert_eq!(report.strata.iter().map(|s| s.count).sum::<usize>(), n);
        prop_assert_eq!(report.per_runner.iter().map(|s| s.count).sum::<usize>(), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn synthetic_corpora_load_cleanly(seed in any::<u64>(), runners in 1usize..4) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            sessions_per_runner: (1, 2),
            session_duration_s: 120.0,
            question_interval_s: (20.0, 40.0),
            seed,
            ..SynthConfig::default()
        };
        let summary = generate_corpus(&cfg, &DemographicsPlan::balanced(runners), dir.path()).unwrap();
        let (sessions, profiles) = load_manifest(dir.path()).unwrap();
        prop_assert_eq!(profiles.len(), runners);
        prop_assert_eq!(sessions.len(), summary.n_sessions);
        prop_assert_eq!(sessions.iter().map(|s| s.events.len()).sum::<usize>(), summary.n_events);
    }
}

#[test]
fn model_embedding_and_output_shapes_for_several_lengths() {
    let cfg = ModelConfig::with_width(0.125);
    let mut model = build_cnn14(&cfg, 3).unwrap();
    model.set_standardization(Standardization::identity(64)).unwrap();
    for t in [64, 65, 127, 200] {
        let batch = Tensor::zeros(vec![2, 1, t, 64]);
        assert_eq!(model.embed(&batch).unwrap().shape(), &[2, cfg.embedding_dim()]);
        let out = model.forward_outputs(&batch, Mode::Eval, 0).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
    }
}

fn fake_segments(sessions: &[usize]) -> Vec<Segment> {
    let mut out = Vec::new();
    for (s, &n) in sessions.iter().enumerate() {
        for e in 0..n {
            out.push(Segment {
                segment_id: format!("s{s:02}-e{e:03}"),
                session_id: format!("s{s:02}"),
                runner_id: format!("r{:02}", s % 5),
                start_s: 0.0,
                end_s: 30.0,
                fatigue: 12,
                wellbeing: 0,
                surface: "asphalt".into(),
                feature_path: None,
            });
        }
    }
    out
}

fn profiles(n: usize) -> Vec<RunnerProfile> {
    let ages = [AgeRange::From21To30, AgeRange::From31To40, AgeRange::From41To50];
    (0..n)
        .map(|i| RunnerProfile {
            runner_id: format!("r{i:03}"),
            age_range: ages[i % ages.len()],
            sex: if i % 2 == 0 { Sex::F } else { Sex::M },
        })
        .collect()
}
