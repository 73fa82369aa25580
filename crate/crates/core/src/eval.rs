//! Dice evaluation and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::{total_loss, LossValue};
use crate::train::{csv_err, params_digest, predict_field, Checkpoint};
use crate::volume::{SegmentationMap, Shape3, VolumePair};
use crate::warp::warp_nearest;

pub const REFERENCE_STRUCTURES: [&str; 4] = ["Brain stem", "Parietal", "Hippocampus", "Putamen"];

/// Published LPBA40 Dice values, shipped as context only.
pub const REFERENCE_DICE: [(&str, [f64; 4]); 5] = [
    ("SyN", [0.772, 0.501, 0.506, 0.501]),
    ("VM", [0.781, 0.554, 0.518, 0.544]),
    ("VTN", [0.791, 0.582, 0.516, 0.547]),
    ("CM", [0.787, 0.565, 0.519, 0.558]),
    ("TUNet", [0.798, 0.606, 0.547, 0.574]),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelDice {
    pub dice: f64,
    /// Label absent from both maps; `dice` is then the convention value 1.0.
    pub both_empty: bool,
}

/// Binary Dice per label: `2|R ∩ F| / (|R| + |F|)`.
pub fn dice_per_label(
    r: &SegmentationMap,
    f: &SegmentationMap,
    labels: &BTreeSet<i32>,
) -> Result<BTreeMap<i32, LabelDice>> {
    if r.shape() != f.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", r.shape(), f.shape())));
    }
    let mut counts: BTreeMap<i32, [usize; 3]> = labels.iter().map(|&l| (l, [0; 3])).collect();
    for (&a, &b) in r.as_slice().iter().zip(f.as_slice()) {
        if let Some(c) = counts.get_mut(&a) {
            c[0] += 1;
            if a == b {
                c[2] += 1;
            }
        }
        if let Some(c) = counts.get_mut(&b) {
            c[1] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(l, [nr, nf, both])| {
            let d = if nr + nf == 0 {
                LabelDice { dice: 1.0, both_empty: true }
            } else {
                LabelDice {
                    dice: 2.0 * both as f64 / (nr + nf) as f64,
                    both_empty: false,
                }
            };
            (l, d)
        })
        .collect())
}

/// Mean Dice over the foreground labels present in either map.
pub fn mean_dice(r: &SegmentationMap, f: &SegmentationMap) -> Result<f64> {
    let labels: BTreeSet<i32> = r.foreground_labels().union(&f.foreground_labels()).copied().collect();
    if labels.is_empty() {
        return Err(Error::MissingSegmentation);
    }
    let per = dice_per_label(r, f, &labels)?;
    Ok(per.values().map(|d| d.dice).sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub label: i32,
    pub dice: f64,
    pub baseline_dice: f64,
    pub both_empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub checkpoint_id: String,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationReport {
    pub per_label: Vec<LabelRow>,
    pub mean_dice: f64,
    pub baseline_dice: f64,
    pub loss: Option<LossValue>,
    /// Kept out of the report files so they stay byte-stable across runs.
    pub runtime_s: f64,
    pub provenance: Provenance,
}

fn config_hash(ckpt: &Checkpoint) -> String {
    let mut h = Sha256::new();
    h.update(bincode::serialize(&ckpt.model_config).expect("serializable config"));
    h.update(bincode::serialize(&ckpt.train_config).expect("serializable config"));
    format!("{:x}", h.finalize())
}

pub fn provenance(ckpt: &Checkpoint) -> Provenance {
    Provenance {
        config_hash: config_hash(ckpt),
        checkpoint_id: params_digest(&ckpt.params)[..16].to_string(),
        step: ckpt.step,
    }
}

/// Registers `pair` with the checkpoint and compares warped vs fixed labels
/// against the unregistered baseline. `labels = None` uses every foreground
/// label present in either map.
pub fn evaluate_registration(
    ckpt: &Checkpoint,
    pair: &VolumePair,
    labels: Option<&BTreeSet<i32>>,
    tiling: Option<(Shape3, Shape3)>,
) -> Result<RegistrationReport> {
    let (Some(ms), Some(fs)) = (&pair.moving_seg, &pair.fixed_seg) else {
        return Err(Error::MissingSegmentation);
    };
    let labels: BTreeSet<i32> = match labels {
        Some(l) => l.clone(),
        None => ms.foreground_labels().union(&fs.foreground_labels()).copied().collect(),
    };
    if labels.is_empty() {
        return Err(Error::MissingSegmentation);
    }
    let start = Instant::now();
    let field = predict_field(&ckpt.model_config, &ckpt.params, &pair.moving, &pair.fixed, tiling)?;
    let runtime_s = start.elapsed().as_secs_f64();
    let registered = warp_nearest(ms, &field)?;
    let after = dice_per_label(&registered, fs, &labels)?;
    let before = dice_per_label(ms, fs, &labels)?;
    let per_label: Vec<LabelRow> = labels
        .iter()
        .map(|l| LabelRow {
            label: *l,
            dice: after[l].dice,
            baseline_dice: before[l].dice,
            both_empty: after[l].both_empty,
        })
        .collect();
    let n = per_label.len() as f64;
    let loss = total_loss(&pair.moving, &pair.fixed, &field, &ckpt.train_config.loss)?;
    Ok(RegistrationReport {
        mean_dice: per_label.iter().map(|r| r.dice).sum::<f64>() / n,
        baseline_dice: per_label.iter().map(|r| r.baseline_dice).sum::<f64>() / n,
        per_label,
        loss: Some(loss),
        runtime_s,
        provenance: provenance(ckpt),
    })
}

/// Footer text quoting the published table.
pub fn reference_footer() -> String {
    let mut s = String::from(
        "Reference values (published LPBA40 Dice, NOT reproduced by this run; context only)\n",
    );
    s.push_str(&format!("{:<8}", "method"));
    for name in REFERENCE_STRUCTURES {
        s.push_str(&format!(" | {name:<11}"));
    }
    s.push('\n');
    for (method, row) in REFERENCE_DICE {
        s.push_str(&format!("{method:<8}"));
        for v in row {
            s.push_str(&format!(" | {v:<11.3}"));
        }
        s.push('\n');
    }
    s
}

pub fn report_text(report: &RegistrationReport) -> String {
    let mut s = String::new();
    s.push_str("registration report\n\n");
    s.push_str(&format!("{:>6} {:>10} {:>10}\n", "label", "dice", "baseline"));
    for r in &report.per_label {
        let flag = if r.both_empty { "  (absent from both maps)" } else { "" };
        s.push_str(&format!("{:>6} {:>10.6} {:>10.6}{flag}\n", r.label, r.dice, r.baseline_dice));
    }
    s.push_str(&format!(
        "\nmean dice {:.6}  baseline {:.6}  gain {:+.6}\n",
        report.mean_dice,
        report.baseline_dice,
        report.mean_dice - report.baseline_dice
    ));
    if let Some(l) = report.loss {
        s.push_str(&format!("loss total {:.6}  cc {:.6}  smooth {:.6}\n", l.total, l.cc, l.smooth));
    }
    s.push('\n');
    s.push_str(&reference_footer());
    let p = &report.provenance;
    s.push_str(&format!(
        "\nprovenance: config {}  checkpoint {}  step {}\n",
        p.config_hash, p.checkpoint_id, p.step
    ));
    s
}

const BAR_W: u32 = 18;
const GROUP_W: u32 = 3 * BAR_W;
const PLOT_H: u32 = 200;
const MARGIN: u32 = 20;

/// Grouped bars per label: baseline (grey) next to registered (blue), on a 0..1 axis.
pub fn render_figure(report: &RegistrationReport) -> RgbImage {
    let n = report.per_label.len() as u32;
    let width = 2 * MARGIN + n.max(1) * GROUP_W;
    let height = PLOT_H + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let base_y = MARGIN + PLOT_H;
    for tick in 0..=4 {
        let y = base_y - tick * PLOT_H / 4;
        for x in MARGIN..width - MARGIN {
            img.put_pixel(x, y, Rgb([220, 220, 220]));
        }
    }
    for (i, row) in report.per_label.iter().enumerate() {
        let x0 = MARGIN + i as u32 * GROUP_W + BAR_W / 2;
        for (j, (v, color)) in [
            (row.baseline_dice, Rgb([150, 150, 150])),
            (row.dice, Rgb([40, 90, 200])),
        ]
        .into_iter()
        .enumerate()
        {
            let h = (v.clamp(0.0, 1.0) * PLOT_H as f64).round() as u32;
            for x in x0 + j as u32 * BAR_W..x0 + (j as u32 + 1) * BAR_W - 2 {
                for y in base_y - h..base_y {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    for x in MARGIN..width - MARGIN {
        img.put_pixel(x, base_y, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=base_y {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    img
}

pub const REPORT_CSV: &str = "dice.csv";
pub const REPORT_FIGURE: &str = "dice.png";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_TIMING: &str = "timing.txt";

/// Writes the CSV, the bar figure, the text report and a separate timing file.
pub fn emit_report(report: &RegistrationReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if report.per_label.is_empty() {
        return Err(Error::MissingSegmentation);
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(["label", "dice", "baseline_dice"]).map_err(csv_err)?;
    for r in &report.per_label {
        w.write_record([r.label.to_string(), r.dice.to_string(), r.baseline_dice.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    drop(w);

    let fig_path = dir.join(REPORT_FIGURE);
    render_figure(report)
        .save_with_format(&fig_path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::IoFailure(io),
            other => Error::IoFailure(std::io::Error::other(other.to_string())),
        })?;

    let text_path = dir.join(REPORT_TEXT);
    fs::write(&text_path, report_text(report))?;
    let timing_path = dir.join(REPORT_TIMING);
    fs::write(&timing_path, format!("runtime_s {:.6}\n", report.runtime_s))?;
    Ok(vec![csv_path, fig_path, text_path, timing_path])
}
