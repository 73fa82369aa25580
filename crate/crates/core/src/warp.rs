//! Differentiable warping of volumes by a dense displacement field.
//!
//! The deformation is `phi(p) = p + u(p)` in voxel units. Sample positions
//! outside the lattice are clamped to the boundary, so interpolation weights
//! always form a partition of unity.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{SegmentationMap, Shape3, Volume};

/// Per-voxel displacement `u`, stored as `(3, H, W, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    u: Array4<f64>,
}

impl DisplacementField {
    pub fn new(u: Array4<f64>) -> Result<Self> {
        if u.shape()[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "displacement field needs 3 components, got {}",
                u.shape()[0]
            )));
        }
        if u.shape()[1..].iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume("empty displacement field".into()));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(
                "displacement field contains NaN or Inf".into(),
            ));
        }
        let u = if u.is_standard_layout() {
            u
        } else {
            u.as_standard_layout().into_owned()
        };
        Ok(Self { u })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            u: Array4::zeros((3, shape[0], shape[1], shape[2])),
        }
    }

    /// Uniform translation by `t` voxels.
    pub fn constant(shape: Shape3, t: [f64; 3]) -> Self {
        let mut u = Array4::zeros((3, shape[0], shape[1], shape[2]));
        for (c, &tc) in t.iter().enumerate() {
            u.index_axis_mut(ndarray::Axis(0), c).fill(tc);
        }
        Self { u }
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.u.shape();
        [s[1], s[2], s[3]]
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.u
    }

    pub fn into_data(self) -> Array4<f64> {
        self.u
    }

    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.u.view()
    }

    pub fn component(&self, c: usize) -> ArrayView3<'_, f64> {
        self.u.index_axis(ndarray::Axis(0), c)
    }

    /// Largest per-voxel Euclidean displacement.
    pub fn max_norm(&self) -> f64 {
        let n = self.u.len() / 3;
        let s = self.u.as_slice().expect("standard layout");
        (0..n)
            .map(|i| (s[i].powi(2) + s[n + i].powi(2) + s[2 * n + i].powi(2)).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            u: &self.u * factor,
        }
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }
}

/// Absolute sample coordinates `phi(p)`, stored as `(3, H, W, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    positions: Array4<f64>,
}

impl SamplingGrid {
    pub fn from_field(field: &DisplacementField) -> Self {
        let mut positions = identity_grid(field.shape()).positions;
        positions += field.data();
        Self { positions }
    }

    pub fn positions(&self) -> &Array4<f64> {
        &self.positions
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.positions[[0, i, j, k]],
            self.positions[[1, i, j, k]],
            self.positions[[2, i, j, k]],
        ]
    }
}

pub fn identity_grid(shape: Shape3) -> SamplingGrid {
    let positions = Array4::from_shape_fn((3, shape[0], shape[1], shape[2]), |(c, i, j, k)| {
        [i, j, k][c] as f64
    });
    SamplingGrid { positions }
}

/// Lattice neighbours and blend fraction along one axis.
#[derive(Debug, Clone, Copy)]
struct AxisSample {
    lo: usize,
    hi: usize,
    frac: f64,
    /// False when the coordinate was clamped; the sample then does not move
    /// with the field.
    active: bool,
}

impl AxisSample {
    #[inline]
    fn new(x: f64, n: usize) -> Self {
        if n == 1 {
            return Self {
                lo: 0,
                hi: 0,
                frac: 0.0,
                active: false,
            };
        }
        let top = (n - 1) as f64;
        let active = (0.0..=top).contains(&x);
        let xc = x.clamp(0.0, top);
        let lo = (xc.floor() as usize).min(n - 2);
        Self {
            lo,
            hi: lo + 1,
            frac: xc - lo as f64,
            active,
        }
    }

    #[inline]
    fn weights(&self) -> [f64; 2] {
        [1.0 - self.frac, self.frac]
    }

    #[inline]
    fn idx(&self) -> [usize; 2] {
        [self.lo, self.hi]
    }
}

#[inline]
fn samples_at(
    shape: Shape3,
    u: &[f64],
    n: usize,
    flat: usize,
    i: usize,
    j: usize,
    k: usize,
) -> [AxisSample; 3] {
    [
        AxisSample::new(i as f64 + u[flat], shape[0]),
        AxisSample::new(j as f64 + u[n + flat], shape[1]),
        AxisSample::new(k as f64 + u[2 * n + flat], shape[2]),
    ]
}

fn check_shapes(a: Shape3, b: Shape3) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "volume {a:?} vs displacement field {b:?}"
        )));
    }
    Ok(())
}

/// Trilinear resampling of a raw grid; the shared kernel behind
/// [`warp_trilinear`] and the batched training path.
pub fn warp_array(m: ArrayView3<'_, f64>, u: ArrayView4<'_, f64>) -> Array3<f64> {
    let shape = [m.shape()[0], m.shape()[1], m.shape()[2]];
    let m = m.as_standard_layout();
    let u = u.as_standard_layout();
    let ms = m.as_slice().expect("standard layout");
    let us = u.as_slice().expect("standard layout");
    let [h, w, d] = shape;
    let n = h * w * d;
    let mut out = vec![0.0; n];
    par::for_each_chunk_mut(&mut out, w * d, |i, row| {
        for j in 0..w {
            for k in 0..d {
                let flat = (i * w + j) * d + k;
                let s = samples_at(shape, us, n, flat, i, j, k);
                let (wx, wy, wz) = (s[0].weights(), s[1].weights(), s[2].weights());
                let (ix, iy, iz) = (s[0].idx(), s[1].idx(), s[2].idx());
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        let wab = wx[a] * wy[b];
                        let base = (ix[a] * w + iy[b]) * d;
                        for c in 0..2 {
                            acc += wab * wz[c] * ms[base + iz[c]];
                        }
                    }
                }
                row[j * d + k] = acc;
            }
        }
    });
    Array3::from_shape_vec((h, w, d), out).expect("shape matches buffer")
}

/// Gradient of `sum(grad_out * warp(m, u))` with respect to the field `u`.
pub fn warp_array_field_grad(
    m: ArrayView3<'_, f64>,
    u: ArrayView4<'_, f64>,
    grad_out: ArrayView3<'_, f64>,
) -> Array4<f64> {
    let shape = [m.shape()[0], m.shape()[1], m.shape()[2]];
    let m = m.as_standard_layout();
    let u = u.as_standard_layout();
    let g = grad_out.as_standard_layout();
    let ms = m.as_slice().expect("standard layout");
    let us = u.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let [h, w, d] = shape;
    let n = h * w * d;
    // Per-row results are [dx; dy; dz] for the W*D voxels of that row.
    let rows = par::map_range(h, |i| {
        let mut r = vec![0.0; 3 * w * d];
        for j in 0..w {
            for k in 0..d {
                let flat = (i * w + j) * d + k;
                let go = gs[flat];
                if go == 0.0 {
                    continue;
                }
                let s = samples_at(shape, us, n, flat, i, j, k);
                let (wx, wy, wz) = (s[0].weights(), s[1].weights(), s[2].weights());
                let (ix, iy, iz) = (s[0].idx(), s[1].idx(), s[2].idx());
                let dws = [-1.0, 1.0];
                let mut dx = 0.0;
                let mut dy = 0.0;
                let mut dz = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        let base = (ix[a] * w + iy[b]) * d;
                        for c in 0..2 {
                            let v = ms[base + iz[c]];
                            dx += dws[a] * wy[b] * wz[c] * v;
                            dy += wx[a] * dws[b] * wz[c] * v;
                            dz += wx[a] * wy[b] * dws[c] * v;
                        }
                    }
                }
                let o = j * d + k;
                if s[0].active {
                    r[o] = go * dx;
                }
                if s[1].active {
                    r[w * d + o] = go * dy;
                }
                if s[2].active {
                    r[2 * w * d + o] = go * dz;
                }
            }
        }
        r
    });
    let mut out = Array4::zeros((3, h, w, d));
    let os = out.as_slice_mut().expect("fresh array");
    for (i, r) in rows.iter().enumerate() {
        for c in 0..3 {
            let dst = c * n + i * w * d;
            os[dst..dst + w * d].copy_from_slice(&r[c * w * d..(c + 1) * w * d]);
        }
    }
    out
}

/// Gradient of `sum(grad_out * warp(m, u))` with respect to the image `m`.
pub fn warp_array_image_grad(u: ArrayView4<'_, f64>, grad_out: ArrayView3<'_, f64>) -> Array3<f64> {
    let shape = [u.shape()[1], u.shape()[2], u.shape()[3]];
    let u = u.as_standard_layout();
    let g = grad_out.as_standard_layout();
    let us = u.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let [h, w, d] = shape;
    let n = h * w * d;
    let mut dm = vec![0.0; n];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let flat = (i * w + j) * d + k;
                let go = gs[flat];
                let s = samples_at(shape, us, n, flat, i, j, k);
                let (wx, wy, wz) = (s[0].weights(), s[1].weights(), s[2].weights());
                let (ix, iy, iz) = (s[0].idx(), s[1].idx(), s[2].idx());
                for a in 0..2 {
                    for b in 0..2 {
                        let base = (ix[a] * w + iy[b]) * d;
                        for c in 0..2 {
                            dm[base + iz[c]] += go * wx[a] * wy[b] * wz[c];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((h, w, d), dm).expect("shape matches buffer")
}

/// Resamples `m` at `phi(p) = p + u(p)` with trilinear interpolation.
pub fn warp_trilinear(m: &Volume, field: &DisplacementField) -> Result<Volume> {
    check_shapes(m.shape(), field.shape())?;
    m.with_data(warp_array(m.data().view(), field.view()))
}

/// Gradients of `sum(grad_out * warp_trilinear(m, field))` with respect to
/// the image and the field.
pub fn warp_trilinear_backward(
    m: &Volume,
    field: &DisplacementField,
    grad_out: &Array3<f64>,
) -> Result<(Array3<f64>, Array4<f64>)> {
    check_shapes(m.shape(), field.shape())?;
    if grad_out.shape() != m.data().shape() {
        return Err(Error::ShapeMismatch("upstream gradient shape".into()));
    }
    let dm = warp_array_image_grad(field.view(), grad_out.view());
    let du = warp_array_field_grad(m.data().view(), field.view(), grad_out.view());
    Ok((dm, du))
}

/// Nearest-neighbour label warp: label at `p` is `s(round(phi(p)))`, with
/// boundary clamping and ties rounded away from zero.
pub fn warp_nearest(s: &SegmentationMap, field: &DisplacementField) -> Result<SegmentationMap> {
    check_shapes(s.shape(), field.shape())?;
    let shape = s.shape();
    let [h, w, d] = shape;
    let src = s.as_slice();
    let u = field.data().as_slice().expect("standard layout");
    let n = h * w * d;
    let pick = |x: f64, len: usize| x.clamp(0.0, (len - 1) as f64).round() as usize;
    let mut out = vec![0i32; n];
    par::for_each_chunk_mut(&mut out, w * d, |i, row| {
        for j in 0..w {
            for k in 0..d {
                let flat = (i * w + j) * d + k;
                let si = pick(i as f64 + u[flat], h);
                let sj = pick(j as f64 + u[n + flat], w);
                let sk = pick(k as f64 + u[2 * n + flat], d);
                row[j * d + k] = src[(si * w + sj) * d + sk];
            }
        }
    });
    SegmentationMap::new(Array3::from_shape_vec((h, w, d), out).expect("shape matches buffer"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: Shape3) -> Volume {
        Volume::from_array(Array3::from_shape_fn(shape, |(i, _, _)| i as f64)).unwrap()
    }

    fn random_volume(shape: Shape3, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_array(Array3::from_shape_fn(shape, |_| rng.gen::<f64>())).unwrap()
    }

    /// Direct evaluation: sum over the 8 lattice neighbours q of
    /// M(q) * prod_d (1 - |phi_d - q_d|), with phi clamped into the lattice.
    fn explicit_blend(m: &Volume, phi: [f64; 3]) -> f64 {
        let s = m.shape();
        let p: Vec<f64> = (0..3)
            .map(|a| phi[a].clamp(0.0, (s[a] - 1) as f64))
            .collect();
        let mut acc = 0.0;
        let base: Vec<i64> = p.iter().map(|x| x.floor() as i64).collect();
        for dx in 0..2i64 {
            for dy in 0..2i64 {
                for dz in 0..2i64 {
                    let q = [base[0] + dx, base[1] + dy, base[2] + dz];
                    let wgt: f64 = (0..3)
                        .map(|a| (1.0 - (p[a] - q[a] as f64).abs()).max(0.0))
                        .product();
                    if wgt == 0.0 {
                        continue;
                    }
                    acc += wgt * m.data()[[q[0] as usize, q[1] as usize, q[2] as usize]];
                }
            }
        }
        acc
    }

    #[test]
    fn identity_grid_values() {
        let g = identity_grid([2, 2, 2]);
        assert_eq!(g.at(1, 0, 1), [1.0, 0.0, 1.0]);
        assert_eq!(identity_grid([1, 1, 1]).at(0, 0, 0), [0.0, 0.0, 0.0]);
        assert_eq!(identity_grid([8, 8, 8]).at(3, 4, 5), [3.0, 4.0, 5.0]);
        assert_eq!(g.positions().len(), 24);
    }

    #[test]
    fn zero_field_is_identity() {
        let m = random_volume([5, 6, 7], 1);
        let out = warp_trilinear(&m, &DisplacementField::zeros([5, 6, 7])).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn integer_shift_matches_index_oracle() {
        let m = ramp([6, 4, 4]);
        let out = warp_trilinear(&m, &DisplacementField::constant([6, 4, 4], [1.0, 0.0, 0.0]))
            .unwrap();
        for ((i, j, k), &v) in out.data().indexed_iter() {
            let oracle = m.data()[[(i + 1).min(5), j, k]];
            assert_eq!(v, oracle, "at {i},{j},{k}");
        }
    }

    #[test]
    fn half_shift_matches_explicit_blend() {
        let m = ramp([6, 4, 4]);
        let f = DisplacementField::constant([6, 4, 4], [0.5, 0.0, 0.0]);
        let out = warp_trilinear(&m, &f).unwrap();
        for ((i, j, k), &v) in out.data().indexed_iter() {
            let phi = [i as f64 + 0.5, j as f64, k as f64];
            assert!((v - explicit_blend(&m, phi)).abs() < 1e-12);
            if i < 5 {
                assert!((v - (i as f64 + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_fields_match_explicit_blend() {
        let m = random_volume([5, 5, 5], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Array4::from_shape_fn((3, 5, 5, 5), |_| rng.gen_range(-2.5..2.5));
        let f = DisplacementField::new(u).unwrap();
        let out = warp_trilinear(&m, &f).unwrap();
        let grid = SamplingGrid::from_field(&f);
        for ((i, j, k), &v) in out.data().indexed_iter() {
            assert!((v - explicit_blend(&m, grid.at(i, j, k))).abs() < 1e-12);
        }
    }

    #[test]
    fn output_stays_within_input_range() {
        let m = random_volume([6, 6, 6], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = Array4::from_shape_fn((3, 6, 6, 6), |_| rng.gen_range(-4.0..4.0));
        let out = warp_trilinear(&m, &DisplacementField::new(u).unwrap()).unwrap();
        let (lo, hi) = m.intensity_range();
        let (olo, ohi) = out.intensity_range();
        assert!(olo >= lo - 1e-12 && ohi <= hi + 1e-12);
    }

    #[test]
    fn field_gradient_matches_finite_differences() {
        let m = random_volume([5, 5, 5], 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Keep samples strictly between lattice points.
        let u = Array4::from_shape_fn((3, 5, 5, 5), |_| {
            let base: f64 = rng.gen_range(-1..2) as f64;
            base + rng.gen_range(0.2..0.8)
        });
        let g = Array3::from_shape_fn((5, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let f = DisplacementField::new(u.clone()).unwrap();
        let (_, du) = warp_trilinear_backward(&m, &f, &g).unwrap();
        let h = 1e-6;
        let obj = |uu: &Array4<f64>| {
            let out = warp_array(m.data().view(), uu.view());
            (&out * &g).sum()
        };
        for idx in [(0, 2, 2, 2), (1, 1, 3, 0), (2, 4, 0, 3), (0, 0, 0, 0)] {
            let mut up = u.clone();
            up[idx] += h;
            let mut um = u.clone();
            um[idx] -= h;
            let fd = (obj(&up) - obj(&um)) / (2.0 * h);
            assert!((fd - du[idx]).abs() < 1e-6, "{idx:?}: fd {fd} vs {}", du[idx]);
        }
    }

    #[test]
    fn image_gradient_is_adjoint() {
        let m = random_volume([4, 5, 3], 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let u = Array4::from_shape_fn((3, 4, 5, 3), |_| rng.gen_range(-1.5..1.5));
        let g = Array3::from_shape_fn((4, 5, 3), |_| rng.gen_range(-1.0..1.0));
        let f = DisplacementField::new(u).unwrap();
        let (dm, _) = warp_trilinear_backward(&m, &f, &g).unwrap();
        // warp is linear in m, so <g, warp(m)> == <dm, m>.
        let lhs = (warp_trilinear(&m, &f).unwrap().data() * &g).sum();
        let rhs = (&dm * m.data()).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn nearest_rounding_contract() {
        let labels = Array3::from_shape_fn((4, 4, 4), |(i, j, k)| ((i * 7 + j * 3 + k) % 5) as i32);
        let s = SegmentationMap::new(labels).unwrap();
        assert_eq!(warp_nearest(&s, &DisplacementField::zeros([4, 4, 4])).unwrap(), s);
        let small = DisplacementField::constant([4, 4, 4], [0.49, 0.49, 0.49]);
        assert_eq!(warp_nearest(&s, &small).unwrap(), s);
    }

    #[test]
    fn nearest_integer_shift_matches_index_oracle() {
        let labels = Array3::from_shape_fn((6, 5, 4), |(i, _, _)| if i < 3 { 1 } else { 2 });
        let s = SegmentationMap::new(labels).unwrap();
        let out = warp_nearest(&s, &DisplacementField::constant([6, 5, 4], [-2.0, 1.0, 0.0])).unwrap();
        for ((i, j, k), &v) in out.labels().indexed_iter() {
            let si = (i as i64 - 2).max(0) as usize;
            let sj = (j + 1).min(4);
            assert_eq!(v, s.labels()[[si, sj, k]]);
        }
        assert!(out.label_set().is_subset(s.label_set()));
    }

    #[test]
    fn nearest_ties_round_away_from_zero() {
        let labels = Array3::from_shape_fn((4, 1, 1), |(i, _, _)| i as i32);
        let s = SegmentationMap::new(labels).unwrap();
        let out = warp_nearest(&s, &DisplacementField::constant([4, 1, 1], [0.5, 0.0, 0.0])).unwrap();
        let got: Vec<i32> = out.labels().iter().copied().collect();
        assert_eq!(got, vec![1, 2, 3, 3]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = Volume::zeros([4, 4, 4]);
        assert!(matches!(
            warp_trilinear(&m, &DisplacementField::zeros([4, 4, 5])),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
