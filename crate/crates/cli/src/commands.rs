//! The five subcommands. Each writes `manifest.toml` into its output directory
//! before the expensive part of the work, after its inputs have been validated.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tunet::data::patches::grid_origins;
use tunet::data::{generate_atlas_pairs, load_nifti, save_nifti};
use tunet::eval::{emit_report, evaluate_registration, mean_dice, provenance, LabelRow, RegistrationReport};
use tunet::gradcheck::{format_table, run_gradchecks, GradcheckOptions};
use tunet::loss::LossValue;
use tunet::model::check_input_shape;
use tunet::train::{load_checkpoint, predict_field, resume, validate_epoch, Checkpoint, TracePoint};
use tunet::warp::{warp_nearest, warp_trilinear};
use tunet::{Error, Result, VolumePair};

use crate::config::{input_path, required, RunConfig, Tiling};

pub const MANIFEST: &str = "manifest.toml";
pub const BASELINE_CSV: &str = "baseline_dice.csv";
pub const PAIRS_CSV: &str = "pairs.csv";

const MOVING: &str = "moving.nii.gz";
const FIXED: &str = "fixed.nii.gz";
const MOVING_SEG: &str = "moving_seg.nii.gz";
const FIXED_SEG: &str = "fixed_seg.nii.gz";
const FIELD: &str = "field.nii.gz";

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    config_path: Option<&'a Path>,
    outputs: Vec<PathBuf>,
    config: &'a RunConfig,
}

fn write_manifest(cfg: &RunConfig, command: &str, config_path: Option<&Path>, outputs: Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let manifest = RunManifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        config_path,
        outputs,
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(cfg.out.join(MANIFEST), text)?;
    Ok(())
}

fn pair_dir(i: usize) -> String {
    format!("pair_{i:03}")
}

/// Pair directories in name order, each with moving and fixed images and optional label maps.
pub fn load_dataset(dir: &Path) -> Result<Vec<VolumePair>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MOVING).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dirs.iter()
        .map(|d| {
            let (moving, _) = load_nifti(d.join(MOVING))?;
            let (fixed, _) = load_nifti(d.join(FIXED))?;
            let seg = |name: &str| -> Result<_> {
                let p = d.join(name);
                if !p.is_file() {
                    return Ok(None);
                }
                Ok(load_nifti(p)?.1)
            };
            VolumePair::new(moving, fixed, seg(MOVING_SEG)?, seg(FIXED_SEG)?)
        })
        .collect()
}

pub fn synth(cfg: &RunConfig, config_path: Option<&Path>) -> Result<()> {
    let spec = cfg.synth.spec(cfg.seed);
    spec.validate()?;
    let range = cfg.synth.first_index..cfg.synth.first_index + cfg.synth.count;
    let mut outputs: Vec<PathBuf> = range.clone().map(|i| cfg.out.join(pair_dir(i))).collect();
    outputs.push(cfg.out.join(BASELINE_CSV));
    write_manifest(cfg, "synth", config_path, outputs)?;

    let mut csv = String::from("pair,baseline_dice\n");
    for (i, (pair, field)) in range.clone().zip(generate_atlas_pairs(&spec, range)?) {
        let dir = cfg.out.join(pair_dir(i));
        fs::create_dir_all(&dir)?;
        save_nifti(&pair.moving, dir.join(MOVING))?;
        save_nifti(&pair.fixed, dir.join(FIXED))?;
        let (ms, fs_) = (pair.moving_seg.as_ref(), pair.fixed_seg.as_ref());
        let (ms, fs_) = (ms.expect("synthetic labels"), fs_.expect("synthetic labels"));
        save_nifti(ms, dir.join(MOVING_SEG))?;
        save_nifti(fs_, dir.join(FIXED_SEG))?;
        save_nifti(&field, dir.join(FIELD))?;
        let d = mean_dice(ms, fs_)?;
        csv.push_str(&format!("{},{d}\n", pair_dir(i)));
        println!("{}  baseline dice {d:.4}  max |u| {:.3}", pair_dir(i), field.max_norm());
    }
    fs::write(cfg.out.join(BASELINE_CSV), csv)?;
    Ok(())
}

fn training_pairs(cfg: &RunConfig) -> Result<Vec<VolumePair>> {
    match &cfg.dataset {
        Some(d) => load_dataset(&input_path(d)),
        None => {
            let spec = cfg.synth.spec(cfg.seed);
            let range = cfg.synth.first_index..cfg.synth.first_index + cfg.synth.count;
            Ok(generate_atlas_pairs(&spec, range)?.into_iter().map(|(p, _)| p).collect())
        }
    }
}

pub fn train(cfg: &RunConfig, config_path: Option<&Path>) -> Result<PathBuf> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    let pairs = training_pairs(cfg)?;
    let held_out = cfg.validation.as_deref().map(|d| load_dataset(&input_path(d))).transpose()?;
    let ckpt = Checkpoint::fresh(cfg.model.clone(), cfg.train.clone(), cfg.seed)?;
    let final_path = cfg.out.join("final.ckpt");
    let outputs = vec![final_path.clone(), cfg.out.join("loss.csv"), cfg.out.join("run_config.toml")];
    write_manifest(cfg, "train", config_path, outputs)?;

    let total = cfg.train.total_steps(pairs.len());
    let per_epoch = cfg.train.steps_per_epoch(pairs.len());
    let every = (total / 20).max(1);
    let mut failure = None;
    let mut hook = |p: &TracePoint, params: &_| {
        let done = p.step + 1;
        if done % every == 0 || done == total {
            println!(
                "step {done:>6}/{total}  loss {:.4}  cc {:.4}  smooth {:.4}",
                p.total, p.cc, p.smooth
            );
        }
        let interval = cfg.train.val_interval;
        if let Some(val) = &held_out {
            if interval > 0 && done % (interval * per_epoch) == 0 {
                match validate_epoch(&cfg.model, params, val, &cfg.train.loss, None) {
                    Ok(v) => println!(
                        "epoch {:>4}  validation loss {:.4}{}",
                        done / per_epoch,
                        v.mean_loss.total,
                        v.mean_dice.map(|d| format!("  dice {d:.4}")).unwrap_or_default()
                    ),
                    Err(e) => {
                        failure = Some(e);
                        return false;
                    }
                }
            }
        }
        true
    };
    let ckpt = resume(ckpt, &pairs, &mut hook)?;
    if let Some(e) = failure {
        return Err(e);
    }
    println!("wrote {} (step {})", final_path.display(), ckpt.step);
    Ok(final_path)
}

fn check_tiling(shape: tunet::Shape3, tiling: Option<Tiling>) -> Result<()> {
    match tiling {
        None => check_input_shape(shape),
        Some(t) => {
            check_input_shape(t.patch)?;
            grid_origins(shape, t.patch, t.stride).map(|_| ())
        }
    }
}

pub fn register(cfg: &RunConfig, config_path: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(required(&cfg.register.checkpoint, "register.checkpoint")?)?;
    let (moving, _) = load_nifti(required(&cfg.register.moving, "register.moving")?)?;
    let (fixed, _) = load_nifti(required(&cfg.register.fixed, "register.fixed")?)?;
    let moving_seg = match &cfg.register.moving_seg {
        Some(p) => Some(load_nifti(input_path(p))?.1.ok_or(Error::MissingSegmentation)?),
        None => None,
    };
    if let Some(seg) = &moving_seg {
        if seg.shape() != moving.shape() {
            return Err(Error::ShapeMismatch(format!(
                "moving {:?} vs moving_seg {:?}",
                moving.shape(),
                seg.shape()
            )));
        }
    }
    if moving.shape() != fixed.shape() {
        return Err(Error::ShapeMismatch(format!(
            "moving {:?} vs fixed {:?}",
            moving.shape(),
            fixed.shape()
        )));
    }
    check_tiling(moving.shape(), cfg.register.tiling)?;

    let warped_path = cfg.out.join("warped.nii.gz");
    let field_path = cfg.out.join(FIELD);
    let seg_path = cfg.out.join("warped_seg.nii.gz");
    let mut outputs = vec![warped_path.clone(), field_path.clone()];
    if moving_seg.is_some() {
        outputs.push(seg_path.clone());
    }
    write_manifest(cfg, "register", config_path, outputs)?;

    let tiling = Tiling::pair(cfg.register.tiling);
    let field = predict_field(&ckpt.model_config, &ckpt.params, &moving, &fixed, tiling)?;
    save_nifti(&warp_trilinear(&moving, &field)?, &warped_path)?;
    save_nifti(&field, &field_path)?;
    if let Some(seg) = &moving_seg {
        save_nifti(&warp_nearest(seg, &field)?, &seg_path)?;
    }
    println!("max |u| {:.4}; wrote {}", field.max_norm(), warped_path.display());
    Ok(())
}

/// Per-label means over pairs; a label counts only in the pairs that evaluate it.
fn aggregate(reports: &[RegistrationReport], ckpt: &Checkpoint) -> RegistrationReport {
    let mut sums: BTreeMap<i32, (f64, f64, usize, bool)> = BTreeMap::new();
    for r in reports {
        for row in &r.per_label {
            let e = sums.entry(row.label).or_insert((0.0, 0.0, 0, true));
            e.0 += row.dice;
            e.1 += row.baseline_dice;
            e.2 += 1;
            e.3 &= row.both_empty;
        }
    }
    let per_label: Vec<LabelRow> = sums
        .into_iter()
        .map(|(label, (d, b, n, empty))| LabelRow {
            label,
            dice: d / n as f64,
            baseline_dice: b / n as f64,
            both_empty: empty,
        })
        .collect();
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&RegistrationReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let losses: Option<Vec<LossValue>> = reports.iter().map(|r| r.loss).collect();
    RegistrationReport {
        mean_dice: mean(&|r| r.mean_dice),
        baseline_dice: mean(&|r| r.baseline_dice),
        loss: losses.map(|l| LossValue {
            total: l.iter().map(|v| v.total).sum::<f64>() / n,
            cc: l.iter().map(|v| v.cc).sum::<f64>() / n,
            smooth: l.iter().map(|v| v.smooth).sum::<f64>() / n,
        }),
        per_label,
        runtime_s: reports.iter().map(|r| r.runtime_s).sum(),
        provenance: provenance(ckpt),
    }
}

pub fn evaluate(cfg: &RunConfig, config_path: Option<&Path>) -> Result<RegistrationReport> {
    let ckpt = load_checkpoint(required(&cfg.evaluate.checkpoint, "evaluate.checkpoint")?)?;
    let pairs = load_dataset(&required(&cfg.dataset, "dataset")?)?;
    if pairs.iter().any(|p| !p.has_segmentations()) {
        return Err(Error::MissingSegmentation);
    }
    for p in &pairs {
        check_tiling(p.shape(), cfg.evaluate.tiling)?;
    }
    let mut outputs: Vec<PathBuf> = (0..pairs.len()).map(|i| cfg.out.join(pair_dir(i))).collect();
    outputs.push(cfg.out.join(PAIRS_CSV));
    outputs.extend(
        [tunet::eval::REPORT_CSV, tunet::eval::REPORT_FIGURE, tunet::eval::REPORT_TEXT, tunet::eval::REPORT_TIMING]
            .map(|f| cfg.out.join(f)),
    );
    write_manifest(cfg, "evaluate", config_path, outputs)?;

    let tiling = Tiling::pair(cfg.evaluate.tiling);
    let mut reports = Vec::with_capacity(pairs.len());
    let mut csv = String::from("pair,dice,baseline_dice\n");
    for (i, pair) in pairs.iter().enumerate() {
        let r = evaluate_registration(&ckpt, pair, None, tiling)?;
        emit_report(&r, cfg.out.join(pair_dir(i)))?;
        csv.push_str(&format!("{},{},{}\n", pair_dir(i), r.mean_dice, r.baseline_dice));
        println!("{}  dice {:.4}  baseline {:.4}", pair_dir(i), r.mean_dice, r.baseline_dice);
        reports.push(r);
    }
    fs::write(cfg.out.join(PAIRS_CSV), csv)?;
    let summary = aggregate(&reports, &ckpt);
    emit_report(&summary, &cfg.out)?;
    println!(
        "mean dice {:.4}  baseline {:.4}  gain {:+.4}",
        summary.mean_dice,
        summary.baseline_dice,
        summary.mean_dice - summary.baseline_dice
    );
    Ok(summary)
}

/// Prints the table and returns the number of failed checks.
pub fn gradcheck(cfg: &RunConfig, config_path: Option<&Path>) -> Result<usize> {
    if let Some(t) = cfg.gradcheck.tolerance {
        if !(t > 0.0) {
            return Err(Error::InvalidConfig(format!("tolerance must be > 0, got {t}")));
        }
    }
    let table_path = cfg.out.join("gradcheck.txt");
    write_manifest(cfg, "gradcheck", config_path, vec![table_path.clone()])?;
    let opts = GradcheckOptions {
        tolerance_override: cfg.gradcheck.tolerance,
        flip_cc_sign: cfg.gradcheck.flip_cc_sign,
        seed: cfg.seed,
    };
    let results = run_gradchecks(&opts, cfg.gradcheck.include_model)?;
    let table = format_table(&results);
    print!("{table}");
    fs::write(&table_path, &table)?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        println!("{failed} of {} checks failed", results.len());
    }
    Ok(failed)
}
