//! Labeled blob phantoms and smooth ground-truth deformations.

use ndarray::{s, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::preprocess::gaussian_smooth;
use crate::error::{Error, Result};
use crate::volume::{SegmentationMap, Shape3, Volume, VolumePair};
use crate::warp::{warp_nearest, warp_trilinear, DisplacementField};

const PHANTOM_STREAM: u64 = 1;
const FIELD_STREAM: u64 = 2;
const ATLAS_FIELD_STREAM_BASE: u64 = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape: Shape3,
    pub num_blobs: usize,
    /// Gaussian sigma of the field smoothing, in voxels.
    pub field_smoothness: f64,
    /// Largest displacement magnitude, in voxels.
    pub max_displacement: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            shape: [32, 32, 32],
            num_blobs: 4,
            field_smoothness: 4.0,
            max_displacement: 3.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d == 0 || d % 8 != 0) {
            return Err(Error::InvalidSpec(format!(
                "shape {:?} must have non-zero dims divisible by 8",
                self.shape
            )));
        }
        if self.num_blobs == 0 {
            return Err(Error::InvalidSpec("num_blobs must be at least 1".into()));
        }
        if !self.max_displacement.is_finite() || self.max_displacement < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "max_displacement {} must be finite and >= 0",
                self.max_displacement
            )));
        }
        if !self.field_smoothness.is_finite() || self.field_smoothness < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "field_smoothness {} must be finite and >= 0",
                self.field_smoothness
            )));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Ellipsoidal blobs with labels `1..=num_blobs` over a faint textured background.
/// Later blobs overwrite earlier ones where they overlap.
pub fn generate_phantom(spec: &SyntheticSpec) -> Result<(Volume, SegmentationMap)> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, PHANTOM_STREAM);
    let shape = spec.shape;
    let min_dim = *shape.iter().min().expect("three dims") as f64;
    let (r_lo, r_hi) = ((min_dim / 8.0).max(1.0), (min_dim / 4.0).max(1.5));

    let mut labels = Array3::<i32>::zeros(shape);
    let mut intensity = Array3::<f64>::from_elem(shape, 0.1);
    for label in 1..=spec.num_blobs as i32 {
        let radii: [f64; 3] = std::array::from_fn(|_| rng.gen_range(r_lo..r_hi));
        let center: [f64; 3] = std::array::from_fn(|a| {
            let n = shape[a] as f64;
            let margin = radii[a].min(n / 2.0 - 0.5);
            rng.gen_range(margin..=(n - 1.0 - margin))
        });
        let level = rng.gen_range(0.35..1.0);
        for ((i, j, k), l) in labels.indexed_iter_mut() {
            let p = [i as f64, j as f64, k as f64];
            let r2: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
            if r2 <= 1.0 {
                *l = label;
                intensity[[i, j, k]] = level;
            }
        }
    }
    let noise = Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal));
    let texture = gaussian_smooth(&noise, 2.0);
    let amp = texture.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut data = gaussian_smooth(&intensity, 0.75);
    if amp > 0.0 {
        data.zip_mut_with(&texture, |d, t| *d += 0.08 * t / amp);
    }
    Ok((Volume::from_array(data)?, SegmentationMap::new(labels)?))
}

fn smooth_field(shape: Shape3, sigma: f64, max_disp: f64, rng: &mut ChaCha8Rng) -> DisplacementField {
    // Noise is drawn on a padded grid and cropped so the field is stationary up to the border.
    let pad = (3.0 * sigma).ceil() as usize;
    let padded = shape.map(|n| n + 2 * pad);
    let mut u = Array4::<f64>::zeros((3, shape[0], shape[1], shape[2]));
    for mut comp in u.axis_iter_mut(Axis(0)) {
        let noise = Array3::from_shape_simple_fn(padded, || rng.sample::<f64, _>(StandardNormal));
        let smooth = gaussian_smooth(&noise, sigma);
        comp.assign(&smooth.slice(s![pad..pad + shape[0], pad..pad + shape[1], pad..pad + shape[2]]));
    }
    let field = DisplacementField::new(u).expect("finite field");
    let peak = field.max_norm();
    if max_disp == 0.0 || peak == 0.0 {
        DisplacementField::zeros(shape)
    } else {
        field.scaled(max_disp / peak)
    }
}

fn warp_phantom(
    fixed: &Volume,
    fixed_seg: &SegmentationMap,
    field: &DisplacementField,
) -> Result<VolumePair> {
    let moving = warp_trilinear(fixed, field)?;
    let moving_seg = warp_nearest(fixed_seg, field)?;
    VolumePair::new(moving, fixed.clone(), Some(moving_seg), Some(fixed_seg.clone()))
}

/// Builds a phantom as the fixed image and warps it by a smooth random field.
///
/// `moving = fixed ∘ (id + u)`, so warping `fixed_seg` by the returned field with
/// nearest sampling reproduces `moving_seg`.
pub fn generate_synthetic_pair(spec: &SyntheticSpec) -> Result<(VolumePair, DisplacementField)> {
    let (fixed, fixed_seg) = generate_phantom(spec)?;
    let mut rng = stream_rng(spec.seed, FIELD_STREAM);
    let field = smooth_field(spec.shape, spec.field_smoothness, spec.max_displacement, &mut rng);
    let pair = warp_phantom(&fixed, &fixed_seg, &field)?;
    Ok((pair, field))
}

/// Atlas-style pairs sharing one phantom as the fixed image; pair `i` uses its own field stream.
pub fn generate_atlas_pairs(
    spec: &SyntheticSpec,
    indices: std::ops::Range<usize>,
) -> Result<Vec<(VolumePair, DisplacementField)>> {
    let (fixed, fixed_seg) = generate_phantom(spec)?;
    indices
        .map(|i| {
            let mut rng = stream_rng(spec.seed, ATLAS_FIELD_STREAM_BASE + i as u64);
            let field =
                smooth_field(spec.shape, spec.field_smoothness, spec.max_displacement, &mut rng);
            Ok((warp_phantom(&fixed, &fixed_seg, &field)?, field))
        })
        .collect()
}
