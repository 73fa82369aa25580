//! Joint rigid rotation of a registration pair.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{Shape3, VolumePair};
use crate::warp::{warp_nearest, warp_trilinear, DisplacementField};

pub const MAX_ROTATION_DEG: f64 = 30.0;
const SNAP: f64 = 1e-9;

type Mat3 = [[f64; 3]; 3];

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Rotation `R = R2(c) R1(b) R0(a)`, where `Rn` turns the plane orthogonal to axis `n`.
pub fn rotation_matrix(angles_deg: [f64; 3]) -> Mat3 {
    let plane = |axis: usize, deg: f64| -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        let (p, q) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut m = [[0.0; 3]; 3];
        m[axis][axis] = 1.0;
        m[p][p] = c;
        m[p][q] = -s;
        m[q][p] = s;
        m[q][q] = c;
        m
    };
    mul(
        &plane(2, angles_deg[2]),
        &mul(&plane(1, angles_deg[1]), &plane(0, angles_deg[0])),
    )
}

/// Pull-back field for rotating content by `R` about the volume center:
/// output voxel `p` samples input at `c + R^T (p - c)`.
fn rotation_field(shape: Shape3, r: &Mat3) -> DisplacementField {
    let c: [f64; 3] = std::array::from_fn(|a| (shape[a] as f64 - 1.0) / 2.0);
    let mut u = Array4::zeros((3, shape[0], shape[1], shape[2]));
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let p = [i as f64, j as f64, k as f64];
                let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                for a in 0..3 {
                    let mut src = c[a] + (0..3).map(|b| r[b][a] * d[b]).sum::<f64>();
                    if (src - src.round()).abs() < SNAP {
                        src = src.round();
                    }
                    u[[a, i, j, k]] = src - p[a];
                }
            }
        }
    }
    DisplacementField::new(u).expect("finite rotation field")
}

/// Rotates both images (trilinear) and both label maps (nearest) by the same rotation.
pub fn rotate_pair(pair: &VolumePair, angles_deg: [f64; 3]) -> Result<VolumePair> {
    let field = rotation_field(pair.shape(), &rotation_matrix(angles_deg));
    let seg = |s: &Option<_>| s.as_ref().map(|s| warp_nearest(s, &field)).transpose();
    VolumePair::new(
        warp_trilinear(&pair.moving, &field)?,
        warp_trilinear(&pair.fixed, &field)?,
        seg(&pair.moving_seg)?,
        seg(&pair.fixed_seg)?,
    )
}

/// Draws per-axis angles uniformly in `[-max_angle_deg, max_angle_deg]` and rotates the pair.
pub fn random_rotation(pair: &VolumePair, max_angle_deg: f64, seed: u64) -> Result<VolumePair> {
    if !(0.0..=MAX_ROTATION_DEG).contains(&max_angle_deg) {
        return Err(Error::InvalidConfig(format!(
            "rotation angle {max_angle_deg} outside [0, {MAX_ROTATION_DEG}]"
        )));
    }
    if max_angle_deg == 0.0 {
        return Ok(pair.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles = std::array::from_fn(|_| rng.gen_range(-max_angle_deg..=max_angle_deg));
    rotate_pair(pair, angles)
}
