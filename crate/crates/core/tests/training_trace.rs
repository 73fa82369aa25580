//! 200 steps on synthetic 32^3 pairs: the smoothed loss falls, and the trace
//! matches the values recorded from the first run.

use tunet::data::synthetic::{generate_atlas_pairs, SyntheticSpec};
use tunet::model::TUNetConfig;
use tunet::train::{train, TrainConfig};
use tunet::VolumePair;

/// `(step, total loss)` samples from the first run.
const FROZEN: [(usize, f64); 4] = [
    (0, -26387.99838308962),
    (50, -26407.18053619866),
    (100, -26991.943486122622),
    (199, -26672.08813941002),
];

#[test]
fn two_hundred_steps_reduce_the_loss() {
    let spec = SyntheticSpec { seed: 7, ..SyntheticSpec::default() };
    let pairs: Vec<VolumePair> = generate_atlas_pairs(&spec, 0..4)
        .unwrap()
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let model = TUNetConfig {
        level_widths: vec![4, 4, 4, 4],
        ..TUNetConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 50,
        max_steps: Some(200),
        patch_shape: spec.shape,
        seed: 7,
        deterministic: true,
        ..TrainConfig::default()
    };
    let ckpt = train(&model, &cfg, &pairs).unwrap();
    let trace: Vec<f64> = ckpt.loss_trace.iter().map(|p| p.total).collect();
    assert_eq!(trace.len(), 200);
    for (step, v) in FROZEN {
        assert!((trace[step] - v).abs() <= 1e-9 * v.abs(), "step {step}: {} vs {v}", trace[step]);
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&trace[..40]), mean(&trace[160..]));
    assert!(last < first, "smoothed loss {first} -> {last}");
}
