mod common;

use kmfv::interpolation::{pretrain_interpolator, synthetic_triples, InterpolatorSpec, PretrainConfig};
use kmfv::media_io::{make_synthetic_sequence, SyntheticKind};
use kmfv::training::{train, TrainConfig};

#[test]
fn loss_falls_when_overfitting_one_clip() {
    let seq = make_synthetic_sequence(SyntheticKind::TranslatingTexture, 5, 64, 2).unwrap();
    let cfg = TrainConfig {
        model: common::tiny_config(true),
        patch: 64,
        batch_size: 1,
        steps: 40,
        learning_rate: 3e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    let params = common::tiny_model(true, 1);
    let before = params.get("interp.blend.w").ok().cloned();
    let out = train(&[seq], params, &cfg, |_, _| {}).unwrap();
    let head: f64 = out.losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = out.losses[35..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "loss went from {head} to {tail}");
    // The interpolator stays frozen.
    assert_eq!(out.params.get("interp.blend.w").ok().cloned(), before);
    assert_eq!(out.metrics.len(), 40 * 5);
    assert_eq!(out.params.meta.lambda, Some(0.01));
}

#[test]
fn interpolator_pretraining_reduces_error() {
    let data = synthetic_triples(6, 64, 1, 0.0).unwrap();
    let spec = InterpolatorSpec {
        base_channels: 4,
        kernel_size: 5,
        ..InterpolatorSpec::default()
    };
    let cfg = PretrainConfig {
        epochs: 6,
        learning_rate: 3e-3,
        batch_size: 2,
        seed: 0,
    };
    let (store, hist) = pretrain_interpolator(&data, &spec, &cfg).unwrap();
    assert_eq!(hist.len(), 6);
    assert!(hist[5] < hist[0], "{hist:?}");
    assert!(store.names().all(|n| n.starts_with("interp.")));
}
