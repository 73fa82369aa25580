//! Unsupervised registration objective: windowed normalized cross-correlation
//! plus a first-order smoothness penalty on the displacement field.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{Shape3, Volume};
use crate::warp::{self, DisplacementField};

/// Which quantity the smoothness term differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessTarget {
    /// Gradient of the displacement `u`; the identity map costs nothing.
    #[default]
    Displacement,
    /// Gradient of the full map `phi = p + u`, i.e. `I + grad u`.
    Deformation,
}

/// Per-voxel norm of the Jacobian in the smoothness term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessNorm {
    #[default]
    Frobenius,
    SquaredFrobenius,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub cc_window: [usize; 3],
    pub epsilon: f64,
    pub smoothness: SmoothnessTarget,
    pub norm: SmoothnessNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            cc_window: [9, 9, 9],
            epsilon: 1e-5,
            smoothness: SmoothnessTarget::Displacement,
            norm: SmoothnessNorm::Frobenius,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.cc_window.iter().any(|&w| w == 0 || w % 2 == 0) {
            return Err(Error::InvalidConfig(format!(
                "cc_window must be odd and >= 1, got {:?}",
                self.cc_window
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        Ok(())
    }

    fn radius(&self) -> [usize; 3] {
        self.cc_window.map(|w| w / 2)
    }
}

/// Loss value with its two components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub cc: f64,
    pub smooth: f64,
}

/// Sums over the clipped window of the given radius around every voxel.
fn box_sum(src: &[f64], shape: Shape3, radius: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = shape;
    let plane = w * d;

    // Axes 2 and 1 are handled independently per i-slab.
    let mut buf = src.to_vec();
    par::for_each_chunk_mut(&mut buf, plane, |_, slab| {
        let mut line = vec![0.0; w.max(d) + 1];
        let r = radius[2];
        for j in 0..w {
            let row = &mut slab[j * d..(j + 1) * d];
            line[0] = 0.0;
            for k in 0..d {
                line[k + 1] = line[k] + row[k];
            }
            for k in 0..d {
                let lo = k.saturating_sub(r);
                let hi = (k + r).min(d - 1);
                row[k] = line[hi + 1] - line[lo];
            }
        }
        let r = radius[1];
        let mut col = vec![0.0; w];
        for k in 0..d {
            line[0] = 0.0;
            for j in 0..w {
                line[j + 1] = line[j] + slab[j * d + k];
            }
            for (j, c) in col.iter_mut().enumerate() {
                let lo = j.saturating_sub(r);
                let hi = (j + r).min(w - 1);
                *c = line[hi + 1] - line[lo];
            }
            for (j, c) in col.iter().enumerate() {
                slab[j * d + k] = *c;
            }
        }
    });

    // Axis 0 via running slab prefix sums.
    let r = radius[0];
    let mut prefix = vec![0.0; (h + 1) * plane];
    for i in 0..h {
        let (done, rest) = prefix.split_at_mut((i + 1) * plane);
        let prev = &done[i * plane..];
        let cur = &mut rest[..plane];
        let slab = &buf[i * plane..(i + 1) * plane];
        for t in 0..plane {
            cur[t] = prev[t] + slab[t];
        }
    }
    let mut out = vec![0.0; h * plane];
    par::for_each_chunk_mut(&mut out, plane, |i, slab| {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(h - 1);
        let top = &prefix[(hi + 1) * plane..(hi + 2) * plane];
        let bot = &prefix[lo * plane..(lo + 1) * plane];
        for t in 0..plane {
            slab[t] = top[t] - bot[t];
        }
    });
    out
}

fn window_counts(shape: Shape3, radius: [usize; 3]) -> [Vec<f64>; 3] {
    let axis = |n: usize, r: usize| -> Vec<f64> {
        (0..n)
            .map(|i| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as f64)
            .collect()
    };
    [
        axis(shape[0], radius[0]),
        axis(shape[1], radius[1]),
        axis(shape[2], radius[2]),
    ]
}

fn shape_of(a: &ArrayView3<'_, f64>) -> Shape3 {
    [a.shape()[0], a.shape()[1], a.shape()[2]]
}

/// Windowed sums shared by the value and gradient passes.
struct CcStats {
    n: Vec<f64>,
    sa: Vec<f64>,
    sb: Vec<f64>,
    saa: Vec<f64>,
    sbb: Vec<f64>,
    sab: Vec<f64>,
}

fn cc_stats(a: &[f64], b: &[f64], shape: Shape3, radius: [usize; 3]) -> CcStats {
    let counts = window_counts(shape, radius);
    let [h, w, d] = shape;
    let mut n = Vec::with_capacity(a.len());
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                n.push(counts[0][i] * counts[1][j] * counts[2][k]);
            }
        }
    }
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    CcStats {
        n,
        sa: box_sum(a, shape, radius),
        sb: box_sum(b, shape, radius),
        saa: box_sum(&aa, shape, radius),
        sbb: box_sum(&bb, shape, radius),
        sab: box_sum(&ab, shape, radius),
    }
}

/// Local CC and its gradient with respect to `a`, on raw grids.
pub fn local_cc_arrays(
    a: ArrayView3<'_, f64>,
    b: ArrayView3<'_, f64>,
    config: &LossConfig,
    want_grad: bool,
) -> (f64, Option<Array3<f64>>) {
    let shape = shape_of(&a);
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let av = a.as_slice().expect("standard layout");
    let bv = b.as_slice().expect("standard layout");
    let radius = config.radius();
    let st = cc_stats(av, bv, shape, radius);
    let eps = config.epsilon;

    let len = av.len();
    let mut total = 0.0;
    let (mut g_sa, mut g_saa, mut g_sab) = if want_grad {
        (vec![0.0; len], vec![0.0; len], vec![0.0; len])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for v in 0..len {
        let n = st.n[v];
        let cross = st.sab[v] - st.sa[v] * st.sb[v] / n;
        let var_a = (st.saa[v] - st.sa[v] * st.sa[v] / n).max(0.0);
        let var_b = (st.sbb[v] - st.sb[v] * st.sb[v] / n).max(0.0);
        let den = var_a * var_b + eps;
        total += cross * cross / den;
        if want_grad {
            let d_cross = 2.0 * cross / den;
            let d_var_a = -cross * cross * var_b / (den * den);
            g_sab[v] = d_cross;
            g_saa[v] = d_var_a;
            g_sa[v] = d_cross * (-st.sb[v] / n) + d_var_a * (-2.0 * st.sa[v] / n);
        }
    }
    if !want_grad {
        return (total, None);
    }
    // Clipped windows are symmetric: x lies in W(v) iff v lies in W(x).
    let bs_a = box_sum(&g_sa, shape, radius);
    let bs_aa = box_sum(&g_saa, shape, radius);
    let bs_ab = box_sum(&g_sab, shape, radius);
    let grad: Vec<f64> = (0..len)
        .map(|x| bs_a[x] + 2.0 * av[x] * bs_aa[x] + bv[x] * bs_ab[x])
        .collect();
    (
        total,
        Some(Array3::from_shape_vec(shape, grad).expect("shape matches buffer")),
    )
}

/// Sum over voxels of the squared local correlation coefficient.
pub fn local_cc(a: &Volume, b: &Volume, config: &LossConfig) -> Result<f64> {
    check(a.shape(), b.shape())?;
    Ok(local_cc_arrays(a.data().view(), b.data().view(), config, false).0)
}

/// [`local_cc`] together with its gradient with respect to `a`.
pub fn local_cc_with_grad(a: &Volume, b: &Volume, config: &LossConfig) -> Result<(f64, Array3<f64>)> {
    check(a.shape(), b.shape())?;
    let (v, g) = local_cc_arrays(a.data().view(), b.data().view(), config, true);
    Ok((v, g.expect("gradient requested")))
}

fn check(a: Shape3, b: Shape3) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Smoothness penalty and optional gradient on a raw `(3, H, W, D)` grid.
///
/// Forward differences, backward difference on the last index of each axis,
/// zero along axes of length 1. The per-voxel norm is Frobenius.
pub fn smoothness_arrays(
    u: ArrayView4<'_, f64>,
    target: SmoothnessTarget,
    norm_kind: SmoothnessNorm,
    want_grad: bool,
) -> (f64, Option<Array4<f64>>) {
    let squared = norm_kind == SmoothnessNorm::SquaredFrobenius;
    let shape = [u.shape()[1], u.shape()[2], u.shape()[3]];
    let u = u.as_standard_layout();
    let us = u.as_slice().expect("standard layout");
    let [h, w, d] = shape;
    let n = h * w * d;
    let strides = [w * d, d, 1];
    let dims = [h, w, d];
    let offset = if target == SmoothnessTarget::Deformation {
        1.0
    } else {
        0.0
    };

    // For voxel p and axis a: (hi, lo) flat indices of the difference.
    let pair = |flat: usize, idx: [usize; 3], a: usize| -> Option<(usize, usize)> {
        let len = dims[a];
        if len < 2 {
            None
        } else if idx[a] + 1 < len {
            Some((flat + strides[a], flat))
        } else {
            Some((flat, flat - strides[a]))
        }
    };

    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; 3 * n] } else { Vec::new() };
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let flat = (i * w + j) * d + k;
                let idx = [i, j, k];
                let mut jac = [[0.0f64; 3]; 3];
                let mut sq = 0.0;
                for (c, row) in jac.iter_mut().enumerate() {
                    for (a, e) in row.iter_mut().enumerate() {
                        let diff = match pair(flat, idx, a) {
                            Some((hi, lo)) => us[c * n + hi] - us[c * n + lo],
                            None => 0.0,
                        };
                        *e = diff + if c == a { offset } else { 0.0 };
                        sq += *e * *e;
                    }
                }
                let norm = sq.sqrt();
                total += if squared { sq } else { norm };
                if want_grad && norm > 0.0 {
                    for (c, row) in jac.iter().enumerate() {
                        for (a, e) in row.iter().enumerate() {
                            if let Some((hi, lo)) = pair(flat, idx, a) {
                                let g = if squared { 2.0 * e } else { e / norm };
                                grad[c * n + hi] += g;
                                grad[c * n + lo] -= g;
                            }
                        }
                    }
                }
            }
        }
    }
    let grad = want_grad
        .then(|| Array4::from_shape_vec((3, h, w, d), grad).expect("shape matches buffer"));
    (total, grad)
}

/// Sum over voxels of the Frobenius norm of the displacement Jacobian.
pub fn smoothness_penalty(field: &DisplacementField) -> f64 {
    let d = LossConfig::default();
    smoothness_arrays(field.view(), d.smoothness, d.norm, false).0
}

pub fn smoothness_penalty_with_grad(field: &DisplacementField) -> (f64, Array4<f64>) {
    let d = LossConfig::default();
    let (v, g) = smoothness_arrays(field.view(), d.smoothness, d.norm, true);
    (v, g.expect("gradient requested"))
}

/// Loss and its gradient with respect to the displacement, on raw grids.
pub fn total_loss_arrays(
    moving: ArrayView3<'_, f64>,
    fixed: ArrayView3<'_, f64>,
    u: ArrayView4<'_, f64>,
    config: &LossConfig,
    want_grad: bool,
) -> (LossValue, Option<Array4<f64>>) {
    let warped = warp::warp_array(moving, u);
    let (cc, dcc) = local_cc_arrays(warped.view(), fixed, config, want_grad);
    let (smooth, dsmooth) = smoothness_arrays(u, config.smoothness, config.norm, want_grad);
    let value = LossValue {
        total: -cc + config.lambda * smooth,
        cc,
        smooth,
    };
    if !want_grad {
        return (value, None);
    }
    let upstream = dcc.expect("gradient requested").mapv(|g| -g);
    let mut du = warp::warp_array_field_grad(moving, u, upstream.view());
    du.scaled_add(config.lambda, &dsmooth.expect("gradient requested"));
    (value, Some(du))
}

/// `-CC(moving o phi, fixed) + lambda * smoothness(u)`.
pub fn total_loss(
    moving: &Volume,
    fixed: &Volume,
    field: &DisplacementField,
    config: &LossConfig,
) -> Result<LossValue> {
    check(moving.shape(), fixed.shape())?;
    check(moving.shape(), field.shape())?;
    Ok(total_loss_arrays(
        moving.data().view(),
        fixed.data().view(),
        field.view(),
        config,
        false,
    )
    .0)
}

/// [`total_loss`] with its gradient with respect to the displacement.
pub fn total_loss_with_grad(
    moving: &Volume,
    fixed: &Volume,
    field: &DisplacementField,
    config: &LossConfig,
) -> Result<(LossValue, Array4<f64>)> {
    check(moving.shape(), fixed.shape())?;
    check(moving.shape(), field.shape())?;
    let (v, g) = total_loss_arrays(
        moving.data().view(),
        fixed.data().view(),
        field.view(),
        config,
        true,
    );
    Ok((v, g.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape3, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_array(Array3::from_shape_fn(shape, |_| rng.gen::<f64>())).unwrap()
    }

    fn cfg(window: usize) -> LossConfig {
        LossConfig {
            cc_window: [window; 3],
            ..LossConfig::default()
        }
    }

    /// Literal windowed evaluation with explicit local means.
    fn cc_oracle(a: &Volume, b: &Volume, window: usize, eps: f64) -> f64 {
        let s = a.shape();
        let r = (window / 2) as i64;
        let mut total = 0.0;
        for ((i, j, k), _) in a.data().indexed_iter() {
            let mut pts = Vec::new();
            for di in -r..=r {
                for dj in -r..=r {
                    for dk in -r..=r {
                        let p = [i as i64 + di, j as i64 + dj, k as i64 + dk];
                        if (0..3).all(|x| p[x] >= 0 && p[x] < s[x] as i64) {
                            pts.push([p[0] as usize, p[1] as usize, p[2] as usize]);
                        }
                    }
                }
            }
            let n = pts.len() as f64;
            let ma = pts.iter().map(|p| a.data()[*p]).sum::<f64>() / n;
            let mb = pts.iter().map(|p| b.data()[*p]).sum::<f64>() / n;
            let mut num = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for p in &pts {
                let da = a.data()[*p] - ma;
                let db = b.data()[*p] - mb;
                num += da * db;
                va += da * da;
                vb += db * db;
            }
            total += num * num / (va * vb + eps);
        }
        total
    }

    /// Explicit per-voxel Jacobian of u, forward differences with a backward one at the end.
    fn smoothness_oracle(u: &Array4<f64>) -> f64 {
        let (_, h, w, d) = u.dim();
        let n = [h, w, d];
        let mut total = 0.0;
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let p = [i, j, k];
                    let mut sq = 0.0;
                    for c in 0..3 {
                        for a in 0..3 {
                            if n[a] < 2 {
                                continue;
                            }
                            let (mut hi, mut lo) = (p, p);
                            if p[a] + 1 < n[a] {
                                hi[a] += 1;
                            } else {
                                lo[a] -= 1;
                            }
                            let e = u[[c, hi[0], hi[1], hi[2]]] - u[[c, lo[0], lo[1], lo[2]]];
                            sq += e * e;
                        }
                    }
                    total += sq.sqrt();
                }
            }
        }
        total
    }

    #[test]
    fn box_sum_matches_brute_force() {
        let v = random([5, 6, 7], 1);
        let bs = box_sum(v.as_slice(), [5, 6, 7], [1, 2, 3]);
        for ((i, j, k), _) in v.data().indexed_iter() {
            let mut acc = 0.0;
            for ii in i.saturating_sub(1)..=(i + 1).min(4) {
                for jj in j.saturating_sub(2)..=(j + 2).min(5) {
                    for kk in k.saturating_sub(3)..=(k + 3).min(6) {
                        acc += v.data()[[ii, jj, kk]];
                    }
                }
            }
            assert!((acc - bs[(i * 6 + j) * 7 + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn self_correlation_is_voxel_count() {
        let a = random([8, 8, 8], 2);
        let cc = local_cc(&a, &a, &cfg(9)).unwrap();
        assert!((cc - 512.0).abs() / 512.0 < 1e-3, "{cc}");
    }

    #[test]
    fn constant_argument_gives_zero() {
        let a = random([6, 6, 6], 3);
        let c = Volume::from_array(Array3::from_elem((6, 6, 6), 0.7)).unwrap();
        assert!(local_cc(&a, &c, &cfg(3)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn matches_literal_oracle() {
        let a = random([7, 7, 7], 4);
        let b = random([7, 7, 7], 5);
        let got = local_cc(&a, &b, &cfg(3)).unwrap();
        let want = cc_oracle(&a, &b, 3, 1e-5);
        assert!((got - want).abs() / want < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn symmetric_and_bounded() {
        let a = random([6, 7, 5], 6);
        let b = random([6, 7, 5], 7);
        let ab = local_cc(&a, &b, &cfg(3)).unwrap();
        let ba = local_cc(&b, &a, &cfg(3)).unwrap();
        assert!((ab - ba).abs() / ab < 1e-6);
        assert!(ab >= 0.0 && ab <= a.len() as f64 + 1e-6);
    }

    #[test]
    fn cc_gradient_matches_finite_differences() {
        let a = random([6, 6, 6], 8);
        let b = random([6, 6, 6], 9);
        let c = cfg(3);
        let (_, g) = local_cc_with_grad(&a, &b, &c).unwrap();
        let h = 1e-6;
        for idx in [[0, 0, 0], [2, 3, 4], [5, 5, 5], [1, 0, 5]] {
            let mut ap = a.data().clone();
            ap[idx] += h;
            let mut am = a.data().clone();
            am[idx] -= h;
            let fp = local_cc_arrays(ap.view(), b.data().view(), &c, false).0;
            let fm = local_cc_arrays(am.view(), b.data().view(), &c, false).0;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-6);
            assert!(rel < 1e-3, "{idx:?}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn smoothness_of_translation_is_zero() {
        let f = DisplacementField::constant([5, 5, 5], [1.5, -2.0, 0.3]);
        assert_eq!(smoothness_penalty(&f), 0.0);
    }

    #[test]
    fn smoothness_of_unit_ramp() {
        let u = Array4::from_shape_fn((3, 8, 8, 8), |(c, i, _, _)| if c == 0 { i as f64 } else { 0.0 });
        let f = DisplacementField::new(u).unwrap();
        assert!((smoothness_penalty(&f) - 512.0).abs() < 1e-12);
    }

    #[test]
    fn smoothness_is_positively_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = Array4::from_shape_fn((3, 5, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let f = DisplacementField::new(u).unwrap();
        let base = smoothness_penalty(&f);
        for c in [0.0, 0.5, 2.0, 3.25] {
            let s = smoothness_penalty(&f.scaled(c));
            assert!((s - c * base).abs() <= 1e-12 * base.max(1.0));
        }
    }

    #[test]
    fn deformation_target_charges_identity() {
        let f = DisplacementField::zeros([4, 4, 4]);
        let (s, _) = smoothness_arrays(f.view(), SmoothnessTarget::Deformation, SmoothnessNorm::Frobenius, false);
        assert!((s - 64.0 * 3f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn lambda_zero_is_pure_cc() {
        let m = random([8, 8, 8], 11);
        let f = random([8, 8, 8], 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let u = DisplacementField::new(Array4::from_shape_fn((3, 8, 8, 8), |_| rng.gen_range(-1.0..1.0))).unwrap();
        let c = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let v = total_loss(&m, &f, &u, &c).unwrap();
        assert_eq!(v.total, -v.cc);
    }

    #[test]
    fn perfect_alignment_is_minus_voxel_count() {
        let m = random([8, 8, 8], 14);
        let v = total_loss(&m, &m, &DisplacementField::zeros([8, 8, 8]), &LossConfig::default()).unwrap();
        assert!((v.total + 512.0).abs() / 512.0 < 1e-3);
        assert_eq!(v.smooth, 0.0);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(cfg(4).validate().is_err());
        assert!(LossConfig { lambda: -1.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { epsilon: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn lambda_tenth_matches_component_oracles() {
        let m = random([16, 16, 16], 21);
        let f = random([16, 16, 16], 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let u = DisplacementField::new(Array4::from_shape_fn((3, 16, 16, 16), |_| rng.gen_range(-1.5..1.5))).unwrap();
        let c = LossConfig::default();
        assert_eq!(c.lambda, 0.1);
        let v = total_loss(&m, &f, &u, &c).unwrap();
        let warped = warp::warp_trilinear(&m, &u).unwrap();
        let want = -cc_oracle(&warped, &f, 9, c.epsilon) + 0.1 * smoothness_oracle(u.data());
        assert!((v.total - want).abs() <= 1e-9 * want.abs(), "{} vs {want}", v.total);
    }

    #[test]
    fn loss_falls_along_a_path_to_the_true_field() {
        use crate::data::synthetic::{generate_synthetic_pair, SyntheticSpec};
        let spec = SyntheticSpec {
            shape: [16, 16, 16],
            num_blobs: 3,
            field_smoothness: 3.0,
            max_displacement: 2.0,
            seed: 31,
        };
        // The generator warps fixed into moving, so the true field registers fixed to moving.
        let (pair, truth) = generate_synthetic_pair(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let noise = Array4::from_shape_fn((3, 16, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let c = LossConfig::default();
        let losses: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|t| {
                let u = DisplacementField::new(truth.data() + &noise * (1.0 - t)).unwrap();
                total_loss(&pair.fixed, &pair.moving, &u, &c).unwrap().total
            })
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }
}
