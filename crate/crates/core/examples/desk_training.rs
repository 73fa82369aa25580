//! Trains a small model on synthetic atlas pairs and reports held-out Dice.
//!
//! `cargo run --release --example desk_training -- [steps] [width0] [blobs] [angle] [u|phi] [sq|fro]`

use std::time::Instant;

use tunet::data::synthetic::{generate_atlas_pairs, SyntheticSpec};
use tunet::loss::{LossConfig, SmoothnessNorm, SmoothnessTarget};
use tunet::model::TUNetConfig;
use tunet::train::{resume, validate_epoch, Checkpoint, TrainConfig};
use tunet::VolumePair;

fn main() -> tunet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let steps = arg(0, 1000.0) as usize;
    let w0 = arg(1, 4.0) as usize;
    let blobs = arg(2, 4.0) as usize;
    let angle = arg(3, 10.0);
    let mut loss = LossConfig::default();
    if args.get(4).map(String::as_str) == Some("phi") {
        loss.smoothness = SmoothnessTarget::Deformation;
    }
    match args.get(5).map(String::as_str) {
        Some("sq") => loss.norm = SmoothnessNorm::SquaredFrobenius,
        Some("fro") => loss.norm = SmoothnessNorm::Frobenius,
        _ => {}
    }

    let spec = SyntheticSpec { num_blobs: blobs, ..SyntheticSpec::default() };
    let strip = |v: Vec<_>| v.into_iter().map(|(p, _)| p).collect::<Vec<VolumePair>>();
    let train_pairs = strip(generate_atlas_pairs(&spec, 0..10)?);
    let held_out = strip(generate_atlas_pairs(&spec, 10..15)?);

    let model = TUNetConfig {
        level_widths: vec![w0, 2 * w0, 2 * w0, 2 * w0],
        ..TUNetConfig::default()
    };
    let cfg = TrainConfig {
        epochs: steps.div_ceil(10),
        max_steps: Some(steps),
        patch_shape: spec.shape,
        augment_max_angle: angle,
        seed: 7,
        loss,
        ..TrainConfig::default()
    };
    let ckpt = Checkpoint::fresh(model.clone(), cfg.clone(), cfg.seed)?;
    let before = validate_epoch(&model, &ckpt.params, &held_out, &cfg.loss, None)?;
    println!("baseline held-out dice {:.4} loss {:.2}", before.mean_dice.unwrap(), before.mean_loss.total);
    let start = Instant::now();
    let mut window = Vec::new();
    let ckpt = resume(ckpt, &train_pairs, &mut |p, params| {
        window.push(p.total);
        if (p.step + 1) % 100 == 0 {
            let v = validate_epoch(&model, params, &held_out, &cfg.loss, None).unwrap();
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            println!(
                "step {:5} train loss {:9.2} held-out dice {:.4} ({:.0}s)",
                p.step + 1,
                mean,
                v.mean_dice.unwrap(),
                start.elapsed().as_secs_f64()
            );
        }
        true
    })?;
    let after = validate_epoch(&model, &ckpt.params, &held_out, &cfg.loss, None)?;
    println!(
        "final held-out dice {:.4} (gain {:+.4}) in {:.0}s",
        after.mean_dice.unwrap(),
        after.mean_dice.unwrap() - before.mean_dice.unwrap(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
