//! Unsupervised atlas-based training, validation, stitched inference and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD, Axis, Ix5, s};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::augment::{random_rotation, MAX_ROTATION_DEG};
use crate::data::patches::{check_patch_shape, crop_pair, grid_origins};
use crate::error::{Error, Result};
use crate::eval::mean_dice;
use crate::loss::{total_loss, total_loss_arrays, LossConfig, LossValue};
use crate::model::{
    build_model, check_input_shape, check_params, forward, forward_on_tape, stack_input,
    ModelParams, TUNetConfig,
};
use crate::nn::tape::{Tape, Var};
use crate::par;
use crate::volume::{Shape3, Volume, VolumePair};
use crate::warp::{warp_nearest, DisplacementField};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TUNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const ORDER_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub patch_shape: Shape3,
    /// Rotation augmentation bound in degrees; 0 disables augmentation.
    pub augment_max_angle: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Epochs between validation passes; 0 disables validation.
    pub val_interval: usize,
    /// Single worker thread for the whole run.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            max_steps: None,
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            batch_size: 1,
            patch_shape: [128, 128, 64],
            augment_max_angle: 10.0,
            seed: 0,
            checkpoint_dir: None,
            checkpoint_interval: 0,
            val_interval: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patch_shape.iter().any(|&p| p == 0 || p % 8 != 0) {
            return bad(format!("patch_shape {:?} must be divisible by 8", self.patch_shape));
        }
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.augment_max_angle) {
            return bad(format!(
                "augment_max_angle {} outside [0, {MAX_ROTATION_DEG}]",
                self.augment_max_angle
            ));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon be > 0".into());
        }
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self, pairs: usize) -> usize {
        pairs.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, pairs: usize) -> usize {
        let all = self.epochs * self.steps_per_epoch(pairs);
        self.max_steps.map_or(all, |m| m.min(all))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub total: f64,
    pub cc: f64,
    pub smooth: f64,
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors().iter().map(|t| ArrayD::zeros(t.raw_dim())).collect();
        AdamState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[ArrayD<f64>], lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_config: TUNetConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub loss_trace: Vec<TracePoint>,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn fresh(model_config: TUNetConfig, train_config: TrainConfig, seed: u64) -> Result<Self> {
        let params = build_model(&model_config, seed)?;
        let optimizer = AdamState::new(&params);
        Ok(Checkpoint {
            model_config,
            train_config,
            params,
            step: 0,
            loss_trace: Vec::new(),
            optimizer,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend(bincode::serialize(self).expect("checkpoint is serializable"));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::MalformedCheckpoint("missing checkpoint header".into()));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
        if found != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint = bincode::deserialize(&bytes[12..])
            .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        check_params(&ckpt.model_config, &ckpt.params)
            .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// SHA-256 over the raw little-endian parameter values.
pub fn params_digest(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        h.update(name.as_bytes());
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

pub fn write_loss_csv(trace: &[TracePoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "total", "cc", "smooth"]).map_err(csv_err)?;
    for p in trace {
        w.write_record([
            p.step.to_string(),
            p.total.to_string(),
            p.cc.to_string(),
            p.smooth.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::IoFailure(io),
        other => Error::IoFailure(std::io::Error::other(format!("{other:?}"))),
    }
}

#[derive(Serialize)]
struct RunConfigFile<'a> {
    model: &'a TUNetConfig,
    train: &'a TrainConfig,
}

/// Key-value record of the configuration stored next to checkpoints.
pub fn write_run_config(model: &TUNetConfig, train: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let text = toml::to_string(&RunConfigFile { model, train })
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::File::create(path)?.write_all(text.as_bytes())?;
    Ok(())
}

/// Loss and parameter gradients for one pair, whole input.
pub fn loss_and_grad(
    config: &TUNetConfig,
    params: &ModelParams,
    pair: &VolumePair,
    loss: &LossConfig,
) -> Result<(LossValue, Vec<ArrayD<f64>>)> {
    let input = stack_input(&pair.moving, &pair.fixed)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().iter().map(|t| tape.param(t.clone())).collect();
    let x = tape.constant(input.into_dyn());
    let (field, _) = forward_on_tape(&mut tape, config, params, &vars, x)?;
    let u = tape
        .value(field)
        .view()
        .into_dimensionality::<Ix5>()
        .expect("field is 5D")
        .index_axis_move(Axis(0), 0);
    let (value, du) = total_loss_arrays(
        pair.moving.data().view(),
        pair.fixed.data().view(),
        u,
        loss,
        true,
    );
    let seed = du.expect("gradient requested").insert_axis(Axis(0)).into_dyn();
    let grads = tape.backward_with(field, seed)?;
    let out = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    Ok((value, out))
}

fn check_dataset(pairs: &[VolumePair]) -> Result<Shape3> {
    let first = pairs.first().ok_or(Error::EmptyDataset)?;
    let shape = first.shape();
    if let Some(p) = pairs.iter().find(|p| p.shape() != shape) {
        return Err(Error::ShapeMismatch(format!(
            "dataset mixes shapes {shape:?} and {:?}",
            p.shape()
        )));
    }
    Ok(shape)
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Pair index visited at `step`, slot `j` of the batch; epochs are independent shuffles.
fn visit_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut step_rng(seed, ORDER_STREAM + epoch as u64));
    order
}

/// One training sample: optional joint rotation, then a random patch.
fn sample(pair: &VolumePair, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<VolumePair> {
    let aug_seed: u64 = rng.gen();
    let pair = if cfg.augment_max_angle > 0.0 {
        random_rotation(pair, cfg.augment_max_angle, aug_seed)?
    } else {
        pair.clone()
    };
    let shape = pair.shape();
    let origin: Shape3 = std::array::from_fn(|a| rng.gen_range(0..=shape[a] - cfg.patch_shape[a]));
    Ok(if cfg.patch_shape == shape {
        pair
    } else {
        crop_pair(&pair, origin, cfg.patch_shape)
    })
}

/// Per-step observer; return `false` to stop after the current step.
pub type StepHook<'a> = dyn FnMut(&TracePoint, &ModelParams) -> bool + Send + 'a;

/// Trains from scratch with model seed `train_cfg.seed`.
pub fn train(model_cfg: &TUNetConfig, train_cfg: &TrainConfig, pairs: &[VolumePair]) -> Result<Checkpoint> {
    let ckpt = Checkpoint::fresh(model_cfg.clone(), train_cfg.clone(), train_cfg.seed)?;
    resume(ckpt, pairs, &mut |_, _| true)
}

/// Continues training `ckpt` with its stored configuration until the step budget is spent.
pub fn resume(mut ckpt: Checkpoint, pairs: &[VolumePair], hook: &mut StepHook<'_>) -> Result<Checkpoint> {
    let cfg = ckpt.train_config.clone();
    cfg.validate()?;
    ckpt.model_config.validate()?;
    check_params(&ckpt.model_config, &ckpt.params)?;
    let shape = check_dataset(pairs)?;
    check_patch_shape(cfg.patch_shape, shape)?;
    if cfg.deterministic {
        par::single_threaded(|| run_steps(&mut ckpt, pairs, &cfg, hook))?;
    } else {
        run_steps(&mut ckpt, pairs, &cfg, hook)?;
    }
    Ok(ckpt)
}

fn run_steps(
    ckpt: &mut Checkpoint,
    pairs: &[VolumePair],
    cfg: &TrainConfig,
    hook: &mut StepHook<'_>,
) -> Result<()> {
    let n = pairs.len();
    let per_epoch = cfg.steps_per_epoch(n);
    let total = cfg.total_steps(n);
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
        write_run_config(&ckpt.model_config, cfg, dir.join("run_config.toml"))?;
    }
    while ckpt.step < total {
        let step = ckpt.step;
        let epoch = step / per_epoch;
        let order = visit_order(cfg.seed, epoch, n);
        let start = (step % per_epoch) * cfg.batch_size;
        let batch = &order[start..(start + cfg.batch_size).min(n)];

        let mut sum = LossValue { total: 0.0, cc: 0.0, smooth: 0.0 };
        let mut grads: Option<Vec<ArrayD<f64>>> = None;
        for (j, &idx) in batch.iter().enumerate() {
            let mut rng = step_rng(cfg.seed, (step * cfg.batch_size + j) as u64);
            let item = sample(&pairs[idx], cfg, &mut rng)?;
            let (v, g) = loss_and_grad(&ckpt.model_config, &ckpt.params, &item, &cfg.loss)?;
            sum.total += v.total;
            sum.cc += v.cc;
            sum.smooth += v.smooth;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, g)| *a += &g),
            }
        }
        let b = batch.len() as f64;
        let point = TracePoint {
            step,
            total: sum.total / b,
            cc: sum.cc / b,
            smooth: sum.smooth / b,
        };
        let mut grads = grads.expect("non-empty batch");
        if !point.total.is_finite() {
            return Err(Error::DivergedLoss { step, value: point.total });
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::DivergedLoss { step, value: f64::NAN });
        }
        if batch.len() > 1 {
            grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v / b));
        }
        ckpt.optimizer.step(&mut ckpt.params, &grads, cfg.learning_rate, &cfg.adam);
        ckpt.loss_trace.push(point);
        ckpt.step += 1;

        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_interval > 0 && ckpt.step % cfg.checkpoint_interval == 0 {
                save_checkpoint(ckpt, dir.join(format!("step_{:06}.ckpt", ckpt.step)))?;
            }
        }
        if !hook(&point, &ckpt.params) {
            break;
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(ckpt, dir.join("final.ckpt"))?;
        write_loss_csv(&ckpt.loss_trace, dir.join("loss.csv"))?;
    }
    Ok(())
}

/// Per-axis linear ramp used to cross-fade overlapping patches.
fn ramp(len: usize, width: usize) -> Vec<f64> {
    let width = width.max(1) as f64;
    (0..len)
        .map(|x| {
            let edge = (x + 1).min(len - x) as f64;
            (edge / width).min(1.0)
        })
        .collect()
}

/// Whole-volume field, or a stitched one when `tiling = Some((patch, stride))`.
/// Overlaps are blended with normalized separable linear ramps.
pub fn predict_field(
    config: &TUNetConfig,
    params: &ModelParams,
    moving: &Volume,
    fixed: &Volume,
    tiling: Option<(Shape3, Shape3)>,
) -> Result<DisplacementField> {
    let Some((patch, stride)) = tiling else {
        return forward(config, params, moving, fixed);
    };
    let shape = moving.shape();
    if fixed.shape() != shape {
        return Err(Error::ShapeMismatch(format!("moving {shape:?} vs fixed {:?}", fixed.shape())));
    }
    check_input_shape(patch)?;
    let pair = VolumePair::new(moving.clone(), fixed.clone(), None, None)?;
    let origins = grid_origins(shape, patch, stride)?;
    let ramps: Vec<Vec<f64>> = (0..3)
        .map(|a| ramp(patch[a], patch[a].saturating_sub(stride[a])))
        .collect();
    let weight = Array3::from_shape_fn(patch, |(i, j, k)| ramps[0][i] * ramps[1][j] * ramps[2][k]);
    let mut acc = Array4::<f64>::zeros((3, shape[0], shape[1], shape[2]));
    let mut norm = Array3::<f64>::zeros(shape);
    for o in origins {
        let sub = crop_pair(&pair, o, patch);
        let u = forward(config, params, &sub.moving, &sub.fixed)?;
        let region = s![o[0]..o[0] + patch[0], o[1]..o[1] + patch[1], o[2]..o[2] + patch[2]];
        norm.slice_mut(region).zip_mut_with(&weight, |n, w| *n += w);
        for c in 0..3 {
            let mut dst = acc.index_axis_mut(Axis(0), c);
            let mut dst = dst.slice_mut(region);
            ndarray::Zip::from(&mut dst)
                .and(&u.component(c))
                .and(&weight)
                .for_each(|d, &v, &w| *d += v * w);
        }
    }
    for c in 0..3 {
        acc.index_axis_mut(Axis(0), c).zip_mut_with(&norm, |v, n| *v /= n);
    }
    DisplacementField::new(acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationResult {
    pub mean_loss: LossValue,
    /// Mean over pairs of the foreground-mean Dice, when every pair has labels.
    pub mean_dice: Option<f64>,
}

/// Whole-volume loss and Dice over `pairs`; parameters are only read.
pub fn validate_epoch(
    config: &TUNetConfig,
    params: &ModelParams,
    pairs: &[VolumePair],
    loss: &LossConfig,
    tiling: Option<(Shape3, Shape3)>,
) -> Result<ValidationResult> {
    check_dataset(pairs)?;
    let mut sum = LossValue { total: 0.0, cc: 0.0, smooth: 0.0 };
    let mut dice = Some(0.0);
    for pair in pairs {
        let u = predict_field(config, params, &pair.moving, &pair.fixed, tiling)?;
        let v = total_loss(&pair.moving, &pair.fixed, &u, loss)?;
        sum.total += v.total;
        sum.cc += v.cc;
        sum.smooth += v.smooth;
        dice = match (dice, &pair.moving_seg, &pair.fixed_seg) {
            (Some(d), Some(ms), Some(fs)) => Some(d + mean_dice(&warp_nearest(ms, &u)?, fs)?),
            _ => None,
        };
    }
    let n = pairs.len() as f64;
    Ok(ValidationResult {
        mean_loss: LossValue {
            total: sum.total / n,
            cc: sum.cc / n,
            smooth: sum.smooth / n,
        },
        mean_dice: dice.map(|d| d / n),
    })
}
