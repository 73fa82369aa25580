//! Shape and intensity conditioning.

use ndarray::{s, Array3, ArrayView3};

use crate::volume::{SegmentationMap, Shape3, Volume};

/// Center crop where the source is larger, symmetric zero pad where smaller.
pub fn crop_or_pad_array<T: Clone + Default>(src: ArrayView3<'_, T>, target: Shape3) -> Array3<T> {
    let mut out = Array3::from_elem(target, T::default());
    let mut src_ranges = [(0usize, 0usize); 3];
    let mut dst_ranges = [(0usize, 0usize); 3];
    for a in 0..3 {
        let n = src.shape()[a];
        let t = target[a];
        if n >= t {
            let start = (n - t) / 2;
            src_ranges[a] = (start, start + t);
            dst_ranges[a] = (0, t);
        } else {
            let before = (t - n) / 2;
            src_ranges[a] = (0, n);
            dst_ranges[a] = (before, before + n);
        }
    }
    let [sa, sb, sc] = src_ranges;
    let [da, db, dc] = dst_ranges;
    out.slice_mut(s![da.0..da.1, db.0..db.1, dc.0..dc.1])
        .assign(&src.slice(s![sa.0..sa.1, sb.0..sb.1, sc.0..sc.1]));
    out
}

pub fn crop_or_pad(volume: &Volume, target: Shape3) -> Volume {
    let data = crop_or_pad_array(volume.data().view(), target.map(|t| t.max(1)));
    Volume::new(data, volume.spacing()).expect("cropping keeps data finite")
}

pub fn crop_or_pad_labels(seg: &SegmentationMap, target: Shape3) -> SegmentationMap {
    SegmentationMap::new(crop_or_pad_array(seg.labels().view(), target.map(|t| t.max(1))))
        .expect("non-empty target")
}

/// Affine map of the intensity range onto `[0, 1]`; constant input maps to zeros.
pub fn minmax_normalize(volume: &Volume) -> Volume {
    let (lo, hi) = volume.intensity_range();
    let span = hi - lo;
    let data = if span > 0.0 {
        volume.data().mapv(|v| ((v - lo) / span).clamp(0.0, 1.0))
    } else {
        Array3::zeros(volume.data().raw_dim())
    };
    Volume::new(data, volume.spacing()).expect("normalized data is finite")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Separable Gaussian blur with replicated borders; `sigma <= 0` is a no-op.
pub fn gaussian_smooth(src: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if !(sigma > 0.0) {
        return src.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let mut cur = src.to_owned();
    for axis in 0..3 {
        let n = cur.shape()[axis] as i64;
        let mut next = Array3::zeros(cur.raw_dim());
        for ((i, j, k), v) in next.indexed_iter_mut() {
            let idx = [i, j, k];
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let pos = (idx[axis] as i64 + t as i64 - r).clamp(0, n - 1) as usize;
                let mut at = idx;
                at[axis] = pos;
                acc += w * cur[at];
            }
            *v = acc;
        }
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_center() {
        let v = Volume::from_array(Array3::from_shape_fn((10, 8, 6), |(i, j, k)| {
            (i * 100 + j * 10 + k) as f64
        }))
        .unwrap();
        let c = crop_or_pad(&v, [6, 8, 2]);
        assert_eq!(c.shape(), [6, 8, 2]);
        assert_eq!(c.data()[[0, 0, 0]], v.data()[[2, 0, 2]]);
    }

    #[test]
    fn same_shape_is_identity() {
        let v = Volume::from_array(Array3::from_shape_fn((4, 5, 6), |(i, j, k)| (i + j * k) as f64)).unwrap();
        assert_eq!(crop_or_pad(&v, [4, 5, 6]), v);
    }

    #[test]
    fn pad_is_symmetric() {
        let v = Volume::from_array(Array3::ones((6, 6, 6))).unwrap();
        let p = crop_or_pad(&v, [8, 8, 8]);
        for ((i, j, k), &x) in p.data().indexed_iter() {
            let border = [i, j, k].iter().any(|&c| c == 0 || c == 7);
            assert_eq!(x, if border { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn crop_then_pad_back_keeps_center() {
        let v = Volume::from_array(Array3::from_shape_fn((9, 9, 9), |(i, j, k)| (i * 81 + j * 9 + k) as f64 + 1.0)).unwrap();
        let back = crop_or_pad(&crop_or_pad(&v, [5, 5, 5]), [9, 9, 9]);
        for i in 2..7 {
            for j in 2..7 {
                for k in 2..7 {
                    assert_eq!(back.data()[[i, j, k]], v.data()[[i, j, k]]);
                }
            }
        }
    }

    #[test]
    fn normalization() {
        let v = Volume::from_array(Array3::from_shape_fn((3, 3, 3), |(i, _, _)| 10.0 + 5.0 * i as f64)).unwrap();
        let n = minmax_normalize(&v);
        assert_eq!(n.intensity_range(), (0.0, 1.0));
        assert_eq!(n.data()[[1, 0, 0]], 0.5);
        let c = Volume::from_array(Array3::from_elem((2, 2, 2), 7.0)).unwrap();
        assert!(minmax_normalize(&c).data().iter().all(|&x| x == 0.0));
        assert_eq!(minmax_normalize(&n), n);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let a = Array3::from_elem((5, 6, 7), 2.5);
        let s = gaussian_smooth(&a, 1.5);
        assert!(s.iter().all(|&x| (x - 2.5).abs() < 1e-12));
    }
}
