//! Finite-difference checks of every analytic gradient.

use ndarray::{Array, Array1, Array3, Array4, Array5, ArrayD, Dimension, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{
    local_cc_arrays, smoothness_arrays, total_loss_arrays, LossConfig, SmoothnessNorm,
    SmoothnessTarget,
};
use crate::model::{build_model, forward, ModelParams, TUNetConfig};
use crate::train::loss_and_grad;
use crate::transformer::{
    scaled_dot_attention, scaled_dot_attention_backward, transformer_block_backward,
    transformer_block_forward, PathMode, TransformerBlockParams,
};
use crate::volume::{Volume, VolumePair};
use crate::warp::{warp_array, warp_array_field_grad, warp_array_image_grad};

pub const TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-2;
const STEP: f64 = 1e-5;
/// Smaller, since ReLU and max-pool kinks are dense in the full network.
const MODEL_STEP: f64 = 1e-6;
const DIRECTIONS: usize = 3;
const COORDINATES: usize = 6;

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    /// Replaces every per-check tolerance.
    pub tolerance_override: Option<f64>,
    /// Mutation hook: negates the analytic CC gradient.
    pub flip_cc_sign: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Relative error, with entries far below the overall gradient `scale` compared absolutely.
fn rel_err(a: f64, n: f64, scale: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6 * scale.max(1.0))
}

/// Probes `f` around `x` along random sign directions and at the coordinates
/// with the largest analytic gradients, plus a few random significant ones.
fn probe(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    rng: &mut ChaCha8Rng,
) -> (f64, usize) {
    let eval = |dir: &dyn Fn(usize) -> f64| {
        let plus: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + STEP * dir(i)).collect();
        let minus: Vec<f64> = x.iter().enumerate().map(|(i, v)| v - STEP * dir(i)).collect();
        (f(&plus) - f(&minus)) / (2.0 * STEP)
    };
    let max = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    let mut probes = 0;
    for _ in 0..DIRECTIONS {
        let signs: Vec<f64> = (0..x.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let a: f64 = analytic.iter().zip(&signs).map(|(g, s)| g * s).sum();
        worst = worst.max(rel_err(a, eval(&|i| signs[i]), max));
        probes += 1;
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| analytic[j].abs().total_cmp(&analytic[i].abs()).then(i.cmp(&j)));
    let significant: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| analytic[i].abs() >= 1e-3 * max)
        .collect();
    let mut picks: Vec<usize> = significant.iter().copied().take(COORDINATES / 2).collect();
    for _ in 0..COORDINATES / 2 {
        if !significant.is_empty() {
            picks.push(significant[rng.gen_range(0..significant.len())]);
        }
    }
    for i in picks {
        worst = worst.max(rel_err(analytic[i], eval(&|j| if j == i { 1.0 } else { 0.0 }), max));
        probes += 1;
    }
    (worst, probes)
}

fn random<Sh, D>(shape: Sh, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array<f64, D>
where
    Sh: ShapeBuilder<Dim = D>,
    D: Dimension,
{
    Array::from_shape_simple_fn(shape, || rng.gen_range(lo..hi))
}

fn flat<D: Dimension>(a: &Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Field with components kept away from integer values, so trilinear weights stay smooth under probing.
fn off_grid_field(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Array4<f64> {
    Array4::from_shape_simple_fn((3, shape[0], shape[1], shape[2]), || {
        let whole = rng.gen_range(-1i32..=1) as f64;
        whole + rng.gen_range(0.1..0.9)
    })
}

struct Suite<'a> {
    opts: &'a GradcheckOptions,
    rng: ChaCha8Rng,
    results: Vec<CheckResult>,
}

impl Suite<'_> {
    fn record(&mut self, name: &str, tol: f64, f: &dyn Fn(&[f64]) -> f64, x: &[f64], g: &[f64]) {
        let (err, probes) = probe(f, x, g, &mut self.rng);
        self.push(name, tol, err, probes);
    }

    fn push(&mut self, name: &str, tol: f64, err: f64, probes: usize) {
        self.results.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
            tolerance: self.opts.tolerance_override.unwrap_or(tol),
            probes,
        });
    }

    fn attention(&mut self) -> Result<()> {
        let shape = (1, 2, 5, 3);
        let q = random(shape, -1.0, 1.0, &mut self.rng);
        let k = random(shape, -1.0, 1.0, &mut self.rng);
        let v = random(shape, -1.0, 1.0, &mut self.rng);
        let w = random(shape, -1.0, 1.0, &mut self.rng);
        let (dq, dk, dv) = scaled_dot_attention_backward(q.view(), k.view(), v.view(), w.view())?;
        let objective = |q: &Array4<f64>, k: &Array4<f64>, v: &Array4<f64>| {
            (scaled_dot_attention(q.view(), k.view(), v.view()).expect("valid shapes") * &w).sum()
        };
        let re = |x: &[f64]| Array4::from_shape_vec(shape, x.to_vec()).expect("shape");
        self.record("attention dQ", TOLERANCE, &|x| objective(&re(x), &k, &v), &flat(&q), &flat(&dq));
        self.record("attention dK", TOLERANCE, &|x| objective(&q, &re(x), &v), &flat(&k), &flat(&dk));
        self.record("attention dV", TOLERANCE, &|x| objective(&q, &k, &re(x)), &flat(&v), &flat(&dv));
        Ok(())
    }

    fn block(&mut self, mode: PathMode) -> Result<()> {
        let label = match mode {
            PathMode::Down => "down",
            PathMode::Up => "up",
        };
        let params = TransformerBlockParams::init(4, 2, 2, mode, &mut self.rng)?;
        let x = random((1, 4, 4, 4, 4), -1.0, 1.0, &mut self.rng);
        let (same, cross) = transformer_block_forward(x.view(), &params)?;
        let gs = random(same.raw_dim(), -1.0, 1.0, &mut self.rng);
        let gc = random(cross.raw_dim(), -1.0, 1.0, &mut self.rng);
        let grads = transformer_block_backward(x.view(), &params, gs.view(), gc.view())?;
        let objective = |x: &Array5<f64>, p: &TransformerBlockParams| {
            let (s, c) = transformer_block_forward(x.view(), p).expect("valid block");
            (s * &gs).sum() + (c * &gc).sum()
        };
        let xs = x.raw_dim();
        self.record(
            &format!("block ({label}) dX"),
            TOLERANCE,
            &|v| objective(&Array5::from_shape_vec(xs, v.to_vec()).expect("shape"), &params),
            &flat(&x),
            &flat(&grads.dx),
        );
        let tensors = params.tensors();
        let flat_params: Vec<f64> = tensors.iter().flat_map(|t| t.iter().copied()).collect();
        let flat_grads: Vec<f64> = grads.params.iter().flat_map(|t| t.iter().copied()).collect();
        let rebuild = |v: &[f64]| {
            let mut p = params.clone();
            let mut at = 0;
            let mut next = |t: &ArrayD<f64>| {
                let n = t.len();
                let out = ArrayD::from_shape_vec(t.raw_dim(), v[at..at + n].to_vec()).expect("shape");
                at += n;
                out
            };
            let d5 = |a: ArrayD<f64>| a.into_dimensionality::<ndarray::Ix5>().expect("5D");
            let d1 = |a: ArrayD<f64>| a.into_dimensionality::<ndarray::Ix1>().expect("1D");
            p.w_q = d5(next(&tensors[0]));
            p.b_q = d1(next(&tensors[1]));
            p.w_k = d5(next(&tensors[2]));
            p.b_k = d1(next(&tensors[3]));
            p.w_v = d5(next(&tensors[4]));
            p.b_v = d1(next(&tensors[5]));
            p.path_weight = d5(next(&tensors[6]));
            p.path_bias = d1(next(&tensors[7]));
            p.ln1_gamma = d1(next(&tensors[8]));
            p.ln1_beta = d1(next(&tensors[9]));
            p.ln2_gamma = d1(next(&tensors[10]));
            p.ln2_beta = d1(next(&tensors[11]));
            p
        };
        self.record(
            &format!("block ({label}) dParams"),
            TOLERANCE,
            &|v| objective(&x, &rebuild(v)),
            &flat_params,
            &flat_grads,
        );
        Ok(())
    }

    fn warp(&mut self) {
        let shape = [6, 5, 4];
        let m = random(shape, 0.0, 1.0, &mut self.rng);
        let u = off_grid_field(shape, &mut self.rng);
        let w = random(shape, -1.0, 1.0, &mut self.rng);
        let du = warp_array_field_grad(m.view(), u.view(), w.view());
        let dm = warp_array_image_grad(u.view(), w.view());
        let us = u.raw_dim();
        self.record(
            "warp dU",
            TOLERANCE,
            &|v| (warp_array(m.view(), Array4::from_shape_vec(us, v.to_vec()).expect("shape").view()) * &w).sum(),
            &flat(&u),
            &flat(&du),
        );
        self.record(
            "warp dM",
            TOLERANCE,
            &|v| (warp_array(Array3::from_shape_vec(shape, v.to_vec()).expect("shape").view(), u.view()) * &w).sum(),
            &flat(&m),
            &flat(&dm),
        );
    }

    fn cc(&mut self) {
        let shape = [7, 6, 5];
        let a = random(shape, 0.0, 1.0, &mut self.rng);
        let b = random(shape, 0.0, 1.0, &mut self.rng);
        let cfg = LossConfig { cc_window: [3, 3, 3], ..LossConfig::default() };
        let (_, g) = local_cc_arrays(a.view(), b.view(), &cfg, true);
        let mut g = g.expect("gradient requested");
        if self.opts.flip_cc_sign {
            g.mapv_inplace(|v| -v);
        }
        self.record(
            "local CC dA",
            TOLERANCE,
            &|v| local_cc_arrays(Array3::from_shape_vec(shape, v.to_vec()).expect("shape").view(), b.view(), &cfg, false).0,
            &flat(&a),
            &flat(&g),
        );
    }

    fn smoothness(&mut self) {
        let kinds = [
            (SmoothnessTarget::Displacement, SmoothnessNorm::Frobenius),
            (SmoothnessTarget::Displacement, SmoothnessNorm::SquaredFrobenius),
            (SmoothnessTarget::Deformation, SmoothnessNorm::Frobenius),
        ];
        for (target, norm) in kinds {
            let u = random((3, 5, 4, 6), -1.0, 1.0, &mut self.rng);
            let (_, g) = smoothness_arrays(u.view(), target, norm, true);
            let us = u.raw_dim();
            self.record(
                &format!("smoothness ({target:?}, {norm:?}) dU"),
                TOLERANCE,
                &|v| smoothness_arrays(Array4::from_shape_vec(us, v.to_vec()).expect("shape").view(), target, norm, false).0,
                &flat(&u),
                &flat(&g.expect("gradient requested")),
            );
        }
    }

    fn total(&mut self) {
        let shape = [8, 8, 8];
        let m = random(shape, 0.0, 1.0, &mut self.rng);
        let f = random(shape, 0.0, 1.0, &mut self.rng);
        let u = off_grid_field(shape, &mut self.rng);
        let cfg = LossConfig { cc_window: [5, 5, 5], ..LossConfig::default() };
        let (_, g) = total_loss_arrays(m.view(), f.view(), u.view(), &cfg, true);
        let us = u.raw_dim();
        self.record(
            "total loss dU",
            TOLERANCE,
            &|v| {
                let u = Array4::from_shape_vec(us, v.to_vec()).expect("shape");
                total_loss_arrays(m.view(), f.view(), u.view(), &cfg, false).0.total
            },
            &flat(&u),
            &flat(&g.expect("gradient requested")),
        );
    }

    /// Every parameter tensor of a small model on a 16^3 pair: one coordinate per
    /// tensor at its largest gradient, plus global directional probes.
    fn model(&mut self) -> Result<()> {
        let cfg = TUNetConfig {
            level_widths: vec![4, 4, 4, 4],
            block_patch_sizes: vec![2, 2, 2, 2],
            block_heads: vec![2, 2, 2, 2],
            ..TUNetConfig::default()
        };
        let mut params = build_model(&cfg, self.opts.seed)?;
        let head = params.get_mut("head.w").expect("field head");
        head.mapv_inplace(|_| self.rng.gen_range(-0.3..0.3));
        // Dead ReLU voxels would otherwise sample exactly on grid points, where trilinear
        // interpolation has a kink.
        let bias = params.get_mut("head.b").expect("field head");
        bias.mapv_inplace(|_| self.rng.gen_range(0.2..0.8));
        let shape = [16, 16, 16];
        let m = Volume::from_array(random(shape, 0.0, 1.0, &mut self.rng))?;
        let f = Volume::from_array(random(shape, 0.0, 1.0, &mut self.rng))?;
        let pair = VolumePair::new(m, f, None, None)?;
        let loss = LossConfig { cc_window: [5, 5, 5], ..LossConfig::default() };
        let (_, grads) = loss_and_grad(&cfg, &params, &pair, &loss)?;
        let objective = |p: &ModelParams| {
            let u = forward(&cfg, p, &pair.moving, &pair.fixed).expect("valid model");
            total_loss_arrays(pair.moving.data().view(), pair.fixed.data().view(), u.view(), &loss, false)
                .0
                .total
        };

        let scale = grads.iter().flat_map(|g| g.iter()).fold(0.0f64, |m, g| m.max(g.abs()));
        let mut worst = 0.0f64;
        let mut probes = 0;
        for (t, g) in grads.iter().enumerate() {
            let Some((idx, &a)) = g.iter().enumerate().max_by(|x, y| x.1.abs().total_cmp(&y.1.abs())) else {
                continue;
            };
            if a == 0.0 {
                continue;
            }
            let shifted = |delta: f64| {
                let mut p = params.clone();
                let cell = p.tensors_mut()[t].iter_mut().nth(idx).expect("index in range");
                *cell += delta;
                objective(&p)
            };
            let n = (shifted(MODEL_STEP) - shifted(-MODEL_STEP)) / (2.0 * MODEL_STEP);
            worst = worst.max(rel_err(a, n, scale));
            probes += 1;
        }
        for _ in 0..DIRECTIONS {
            // Unit length, so the probe stays inside the linear region of the many kinks.
            let total: usize = grads.iter().map(|g| g.len()).sum();
            let unit = 1.0 / (total as f64).sqrt();
            let dirs: Vec<Array1<f64>> = grads
                .iter()
                .map(|g| Array1::from_shape_simple_fn(g.len(), || if self.rng.gen::<bool>() { unit } else { -unit }))
                .collect();
            let a: f64 = grads
                .iter()
                .zip(&dirs)
                .map(|(g, d)| g.iter().zip(d).map(|(g, d)| g * d).sum::<f64>())
                .sum();
            let shifted = |delta: f64| {
                let mut p = params.clone();
                for (t, d) in p.tensors_mut().iter_mut().zip(&dirs) {
                    t.iter_mut().zip(d).for_each(|(v, d)| *v += delta * d);
                }
                objective(&p)
            };
            let n = (shifted(MODEL_STEP) - shifted(-MODEL_STEP)) / (2.0 * MODEL_STEP);
            worst = worst.max(rel_err(a, n, scale));
            probes += 1;
        }
        self.push("full model (16^3) dParams", MODEL_TOLERANCE, worst, probes);
        Ok(())
    }
}

/// Runs every suite; `include_model` adds the slower full-model check.
pub fn run_gradchecks(opts: &GradcheckOptions, include_model: bool) -> Result<Vec<CheckResult>> {
    let mut suite = Suite {
        opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        results: Vec::new(),
    };
    suite.attention()?;
    suite.block(PathMode::Down)?;
    suite.block(PathMode::Up)?;
    suite.warp();
    suite.cc();
    suite.smoothness();
    suite.total();
    if include_model {
        suite.model()?;
    }
    Ok(suite.results)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<32} {:>12} {:>10} {:>7}  result\n", "check", "max rel err", "tolerance", "probes");
    for r in results {
        s.push_str(&format!(
            "{:<32} {:>12.3e} {:>10.0e} {:>7}  {}\n",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.probes,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
