use std::path::PathBuf;

use hyperdet::backbone::BackboneSpec;
use hyperdet::hyperlora::HyperConfig;
use hyperdet::imaging::Image;
use hyperdet::model::{HyperDetModel, ModelConfig};
use hyperdet::nn::fill_normal;
use hyperdet::{DetectorModel, Error, FilterBank, Label, MergeMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn detector(merge: MergeMode) -> DetectorModel {
    let cfg = ModelConfig {
        backbone: BackboneSpec {
            image_size: 16,
            depth: 2,
            width: 16,
            heads: 2,
            feature_dim: 8,
            ..BackboneSpec::default()
        },
        hyper: HyperConfig {
            embed_dim: 4,
            hidden_dim: 8,
            rank: 2,
            ..HyperConfig::default()
        },
        head_init_std: Some(1.0),
        ..ModelConfig::default()
    };
    let mut model = HyperDetModel::new(cfg, 41).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for h in &mut model.trainable.hyper.head_b {
        fill_normal(h.weight.as_slice_mut().unwrap(), 0.3, &mut rng);
    }
    let mut det = DetectorModel::from_model(model, FilterBank::builtin());
    det.merge = merge;
    det
}

fn image(seed: u64, n: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(n, n, 3, |_| rng.random::<f64>())
}

#[test]
fn batch_keeps_input_order_and_reports_bad_files_inline() {
    let det = detector(MergeMode::Probability);
    let dir = tempfile::tempdir().unwrap();
    let mut paths: Vec<PathBuf> = (0..4)
        .map(|i| {
            let p = dir.path().join(format!("img{i}.png"));
            image(100 + i, 16).save_png(&p).unwrap();
            p
        })
        .collect();
    let corrupt = dir.path().join("broken.png");
    std::fs::write(&corrupt, b"not a png").unwrap();
    paths.insert(2, corrupt.clone());
    paths.push(dir.path().join("missing.png"));

    let report = det.detect_batch(&paths, f64::NEG_INFINITY).unwrap();
    let listed: Vec<_> = report.records.iter().map(|r| r.path.clone()).collect();
    assert_eq!(listed, paths);
    assert_eq!(report.summary.total, 6);
    assert_eq!(report.summary.scored, 4);
    assert_eq!(report.summary.failed, 2);
    assert_eq!(report.summary.fake + report.summary.real, 4);
    assert!(report.records[2].error.is_some() && report.records[2].verdict.is_none());

    for rec in report.records.iter().filter(|r| r.verdict.is_some()) {
        let single = det.detect(&Image::open(&rec.path).unwrap(), f64::NEG_INFINITY).unwrap();
        assert_eq!(rec.verdict.as_ref().unwrap(), &single);
    }
}

#[test]
fn batch_with_nothing_scorable_is_an_empty_result() {
    let det = detector(MergeMode::Probability);
    let err = det.detect_batch(&[PathBuf::from("/nonexistent/a.png")], 0.0).unwrap_err();
    assert!(matches!(err, Error::EmptyResult(_)));
}

#[test]
fn views_are_resized_but_raw_backbone_input_is_checked() {
    let det = detector(MergeMode::Probability);
    assert!(det.detect(&image(1, 24), 0.0).is_ok());
    let err = det.model().prepare(&image(1, 12)).unwrap_err();
    assert!(matches!(err, Error::InputSize { .. }));
}

#[test]
fn nan_threshold_is_a_config_error() {
    let det = detector(MergeMode::Probability);
    assert!(matches!(det.detect(&image(2, 16), f64::NAN), Err(Error::Config { .. })));
}

#[test]
fn logit_merge_maps_back_through_the_sigmoid() {
    let det = detector(MergeMode::Logit);
    let v = det.detect(&image(3, 16), f64::NEG_INFINITY).unwrap();
    let mean = v.merged_score / 6.0;
    assert!((v.normalized_score - 1.0 / (1.0 + (-mean).exp())).abs() < 1e-12);
    assert_eq!(v.label == Label::Fake, v.normalized_score >= 0.5);
}

#[test]
fn verdict_round_trips_through_json_with_infinite_thresholds() {
    let det = detector(MergeMode::Probability);
    for t in [f64::INFINITY, f64::NEG_INFINITY, 0.75] {
        let v = det.detect(&image(4, 16), t).unwrap();
        let text = serde_json::to_string(&v).unwrap();
        let back: hyperdet::Verdict = serde_json::from_str(&text).unwrap();
        assert_eq!(back, v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn early_exit_is_a_prefix_of_the_full_merge(seed in 0u64..1000, t in -1.0f64..7.0) {
        let det = detector(MergeMode::Probability);
        let img = image(seed, 16);
        let full = det.detect(&img, f64::NEG_INFINITY).unwrap();
        let cut = det.detect(&img, t).unwrap();
        let k = cut.per_expert_scores.len();
        prop_assert_eq!(k, cut.experts_evaluated + 1);
        prop_assert_eq!(&cut.per_expert_scores[..], &full.per_expert_scores[..k]);
        prop_assert_eq!(&cut.experts[..], &full.experts[..k]);
        // the loop stops at the first prefix sum below the threshold
        let prefix: Vec<f64> = (2..=6).map(|j| full.per_expert_scores[..j].iter().sum()).collect();
        let expected = prefix.iter().position(|&s| s < t).map_or(5, |i| i + 1);
        prop_assert_eq!(cut.experts_evaluated, expected);
    }

    #[test]
    fn scores_stay_in_range(seed in 0u64..1000) {
        let det = detector(MergeMode::Probability);
        let v = det.detect(&image(seed, 16), f64::NEG_INFINITY).unwrap();
        prop_assert!(v.per_expert_scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
        prop_assert!((0.0..=6.0).contains(&v.merged_score));
        prop_assert!((0.0..=1.0).contains(&v.normalized_score));
        prop_assert_eq!(v.experts.clone(), vec![1, 6, 2, 3, 4, 5]);
    }
}
