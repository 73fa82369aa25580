//! Scalar volumes, label maps and moving/fixed pairs.

use std::collections::BTreeSet;

use ndarray::Array3;

use crate::error::{Error, Result};

pub type Shape3 = [usize; 3];

/// A 3D scalar intensity grid indexed `[i, j, k]` with per-axis spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f64>,
    spacing: [f64; 3],
    intensity_range: (f64, f64),
}

impl Volume {
    pub fn new(data: Array3<f64>, spacing: [f64; 3]) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!(
                "zero-sized dimension in {:?}",
                data.shape()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::InvalidVolume("data contains NaN or Inf".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self {
            data,
            spacing,
            intensity_range: (lo, hi),
        })
    }

    /// Unit-spacing volume.
    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        Self::new(data, [1.0; 3])
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            data: Array3::zeros(shape),
            spacing: [1.0; 3],
            intensity_range: (0.0, 0.0),
        }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn intensity_range(&self) -> (f64, f64) {
        self.intensity_range
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("volume data is kept in standard layout")
    }

    pub(crate) fn with_data(&self, data: Array3<f64>) -> Result<Self> {
        Self::new(data, self.spacing)
    }
}

/// Integer label grid; label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    labels: Array3<i32>,
    label_set: BTreeSet<i32>,
}

impl SegmentationMap {
    pub fn new(labels: Array3<i32>) -> Result<Self> {
        if labels.shape().iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!(
                "zero-sized dimension in {:?}",
                labels.shape()
            )));
        }
        let labels = if labels.is_standard_layout() {
            labels
        } else {
            labels.as_standard_layout().into_owned()
        };
        let label_set = labels.iter().copied().collect();
        Ok(Self { labels, label_set })
    }

    pub fn labels(&self) -> &Array3<i32> {
        &self.labels
    }

    /// Every label value present, background included.
    pub fn label_set(&self) -> &BTreeSet<i32> {
        &self.label_set
    }

    /// Present labels other than background.
    pub fn foreground_labels(&self) -> BTreeSet<i32> {
        self.label_set.iter().copied().filter(|&l| l != 0).collect()
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn as_slice(&self) -> &[i32] {
        self.labels.as_slice().expect("labels are kept in standard layout")
    }
}

/// A moving/fixed pair with optional segmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePair {
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_seg: Option<SegmentationMap>,
    pub fixed_seg: Option<SegmentationMap>,
}

impl VolumePair {
    pub fn new(
        moving: Volume,
        fixed: Volume,
        moving_seg: Option<SegmentationMap>,
        fixed_seg: Option<SegmentationMap>,
    ) -> Result<Self> {
        let shape = fixed.shape();
        if moving.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "moving {:?} vs fixed {:?}",
                moving.shape(),
                shape
            )));
        }
        for seg in moving_seg.iter().chain(fixed_seg.iter()) {
            if seg.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "segmentation {:?} vs volume {:?}",
                    seg.shape(),
                    shape
                )));
            }
        }
        Ok(Self {
            moving,
            fixed,
            moving_seg,
            fixed_seg,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.fixed.shape()
    }

    pub fn has_segmentations(&self) -> bool {
        self.moving_seg.is_some() && self.fixed_seg.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        let mut a = Array3::zeros((2, 2, 2));
        a[[1, 1, 1]] = f64::NAN;
        assert!(Volume::from_array(a).is_err());
    }

    #[test]
    fn rejects_bad_spacing() {
        assert!(Volume::new(Array3::zeros((2, 2, 2)), [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn range_is_tracked() {
        let v = Volume::from_array(Array3::from_shape_fn((2, 3, 4), |(i, j, k)| {
            (i + j + k) as f64
        }))
        .unwrap();
        assert_eq!(v.intensity_range(), (0.0, 6.0));
    }

    #[test]
    fn pair_shapes_must_agree() {
        let a = Volume::zeros([2, 2, 2]);
        let b = Volume::zeros([2, 2, 3]);
        assert!(matches!(
            VolumePair::new(a, b, None, None),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
