//! Tiling a pair into fixed-size patches.

use ndarray::s;

use crate::error::{Error, Result};
use crate::volume::{SegmentationMap, Shape3, Volume, VolumePair};

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: Shape3,
    pub pair: VolumePair,
}

/// Start offsets along one axis: a regular stride with the last start clamped to `dim - patch`.
pub fn patch_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut out = Vec::new();
    let mut at = 0;
    loop {
        if at >= last {
            out.push(last);
            break;
        }
        out.push(at);
        at += stride;
    }
    out
}

pub fn check_patch_shape(patch: Shape3, volume: Shape3) -> Result<()> {
    if patch.iter().zip(&volume).any(|(p, v)| p > v) {
        return Err(Error::PatchTooLarge {
            patch,
            volume,
        });
    }
    if patch.iter().any(|&p| p == 0 || p % 8 != 0) {
        return Err(Error::IndivisibleShape {
            shape: patch.to_vec(),
            divisor: 8,
        });
    }
    Ok(())
}

/// All grid origins in row-major order.
pub fn grid_origins(volume: Shape3, patch: Shape3, stride: Shape3) -> Result<Vec<Shape3>> {
    check_patch_shape(patch, volume)?;
    if stride.contains(&0) {
        return Err(Error::InvalidConfig("patch stride must be positive".into()));
    }
    let axes: Vec<Vec<usize>> = (0..3)
        .map(|a| patch_origins(volume[a], patch[a], stride[a]))
        .collect();
    let mut out = Vec::new();
    for &i in &axes[0] {
        for &j in &axes[1] {
            for &k in &axes[2] {
                out.push([i, j, k]);
            }
        }
    }
    Ok(out)
}

pub fn crop_volume(v: &Volume, origin: Shape3, shape: Shape3) -> Volume {
    let [i, j, k] = origin;
    let data = v
        .data()
        .slice(s![i..i + shape[0], j..j + shape[1], k..k + shape[2]])
        .to_owned();
    Volume::new(data, v.spacing()).expect("sub-volume of a valid volume")
}

pub fn crop_labels(m: &SegmentationMap, origin: Shape3, shape: Shape3) -> SegmentationMap {
    let [i, j, k] = origin;
    SegmentationMap::new(
        m.labels()
            .slice(s![i..i + shape[0], j..j + shape[1], k..k + shape[2]])
            .to_owned(),
    )
    .expect("non-empty sub-grid")
}

pub fn crop_pair(pair: &VolumePair, origin: Shape3, shape: Shape3) -> VolumePair {
    VolumePair {
        moving: crop_volume(&pair.moving, origin, shape),
        fixed: crop_volume(&pair.fixed, origin, shape),
        moving_seg: pair.moving_seg.as_ref().map(|m| crop_labels(m, origin, shape)),
        fixed_seg: pair.fixed_seg.as_ref().map(|m| crop_labels(m, origin, shape)),
    }
}

pub fn extract_patch_grid(pair: &VolumePair, patch: Shape3, stride: Shape3) -> Result<Vec<Patch>> {
    Ok(grid_origins(pair.shape(), patch, stride)?
        .into_iter()
        .map(|origin| Patch {
            origin,
            pair: crop_pair(pair, origin, patch),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn pair(shape: Shape3) -> VolumePair {
        let v = Volume::from_array(Array3::from_shape_fn(shape, |(i, j, k)| (i + 2 * j + 3 * k) as f64)).unwrap();
        VolumePair::new(v.clone(), v, None, None).unwrap()
    }

    #[test]
    fn clamped_tiling_count() {
        let origins = grid_origins([192, 160, 192], [128, 128, 64], [128, 128, 64]).unwrap();
        assert_eq!(origins.len(), 12);
        assert_eq!(patch_origins(192, 128, 128), vec![0, 64]);
        assert_eq!(patch_origins(160, 128, 128), vec![0, 32]);
        assert_eq!(patch_origins(192, 64, 64), vec![0, 64, 128]);
    }

    #[test]
    fn whole_volume_patch() {
        let p = pair([16, 16, 8]);
        let patches = extract_patch_grid(&p, [16, 16, 8], [16, 16, 8]).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].origin, [0, 0, 0]);
        assert_eq!(patches[0].pair, p);
    }

    #[test]
    fn exact_tiling_covers_once() {
        let p = pair([32, 32, 32]);
        let patches = extract_patch_grid(&p, [16, 16, 16], [16, 16, 16]).unwrap();
        assert_eq!(patches.len(), 8);
        let mut hits = Array3::<u32>::zeros((32, 32, 32));
        for patch in &patches {
            assert_eq!(patch.pair.shape(), [16, 16, 16]);
            let [i, j, k] = patch.origin;
            hits.slice_mut(s![i..i + 16, j..j + 16, k..k + 16]).mapv_inplace(|h| h + 1);
            assert_eq!(patch.pair.moving.data()[[0, 0, 0]], p.moving.data()[[i, j, k]]);
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn too_large() {
        let p = pair([16, 16, 16]);
        assert!(matches!(
            extract_patch_grid(&p, [24, 8, 8], [8, 8, 8]),
            Err(Error::PatchTooLarge { .. })
        ));
    }
}
