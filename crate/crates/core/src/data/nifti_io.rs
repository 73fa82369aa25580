//! NIfTI-1 reading and writing for volumes, label maps and displacement fields.

use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, Ix3, Ix4};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, NiftiType, ReaderOptions};

use crate::error::{Error, Result};
use crate::volume::{SegmentationMap, Volume};
use crate::warp::DisplacementField;

const XYZT_MM: u8 = 2;
const INTENT_VECTOR: i16 = 1007;

fn is_integer(t: NiftiType) -> bool {
    matches!(
        t,
        NiftiType::Uint8
            | NiftiType::Int8
            | NiftiType::Uint16
            | NiftiType::Int16
            | NiftiType::Uint32
            | NiftiType::Int32
            | NiftiType::Uint64
            | NiftiType::Int64
    )
}

fn read(path: &Path) -> Result<(NiftiHeader, ArrayD<f64>)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let obj = ReaderOptions::new().read_file(path)?;
    let header = obj.header().clone();
    let data = obj.into_volume().into_ndarray::<f64>()?;
    Ok((header, data))
}

fn spacing_of(header: &NiftiHeader) -> Result<[f64; 3]> {
    let sp: [f64; 3] = std::array::from_fn(|a| header.pixdim[a + 1] as f64);
    if sp.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::MalformedHeader(format!("voxel spacing {sp:?}")));
    }
    Ok(sp)
}

fn header_for(spacing: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0; 8];
    for a in 0..3 {
        h.pixdim[a + 1] = spacing[a] as f32;
    }
    h.xyzt_units = XYZT_MM;
    h
}

/// Reads a single 3D image. Integer-typed files additionally yield a label map.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<(Volume, Option<SegmentationMap>)> {
    let path = path.as_ref();
    let (header, data) = read(path)?;
    let shape: Vec<usize> = data.shape().to_vec();
    let data = match shape.len() {
        3 => data,
        4 if shape[3] == 1 => data.into_shape_with_order(&shape[..3]).expect("dropping a unit axis"),
        n => return Err(Error::UnsupportedDims(n)),
    };
    let data: Array3<f64> = data
        .into_dimensionality::<Ix3>()
        .expect("rank checked above");
    let spacing = spacing_of(&header)?;
    let seg = if is_integer(header.data_type()?) {
        Some(SegmentationMap::new(data.mapv(|v| v as i32))?)
    } else {
        None
    };
    Ok((Volume::new(data, spacing)?, seg))
}

/// Reads a 4D field with a trailing component axis of size 3, in voxel units.
pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let (_, data) = read(path.as_ref())?;
    if data.ndim() != 4 || data.shape()[3] != 3 {
        return Err(Error::UnsupportedDims(data.ndim()));
    }
    let data: Array4<f64> = data.into_dimensionality::<Ix4>().expect("rank checked above");
    let u = data.permuted_axes([3, 0, 1, 2]).as_standard_layout().to_owned();
    DisplacementField::new(u)
}

/// Anything storable as a NIfTI image.
pub trait ToNifti {
    fn write_to(&self, path: &Path) -> Result<()>;
}

impl ToNifti for Volume {
    fn write_to(&self, path: &Path) -> Result<()> {
        let h = header_for(self.spacing());
        WriterOptions::new(path).reference_header(&h).write_nifti(self.data())?;
        Ok(())
    }
}

impl ToNifti for SegmentationMap {
    fn write_to(&self, path: &Path) -> Result<()> {
        let h = header_for([1.0; 3]);
        WriterOptions::new(path).reference_header(&h).write_nifti(self.labels())?;
        Ok(())
    }
}

impl ToNifti for DisplacementField {
    fn write_to(&self, path: &Path) -> Result<()> {
        let mut h = header_for([1.0; 3]);
        h.intent_code = INTENT_VECTOR;
        let trailing = self.data().view().permuted_axes([1, 2, 3, 0]);
        let trailing = trailing.as_standard_layout();
        WriterOptions::new(path).reference_header(&h).write_nifti(&trailing)?;
        Ok(())
    }
}

/// Writes `.nii` or, for a `.gz` suffix, gzip-compressed `.nii.gz`.
pub fn save_nifti<T: ToNifti + ?Sized>(item: &T, path: impl AsRef<Path>) -> Result<()> {
    item.write_to(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 3], seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn volume_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(random([8, 6, 4], 1), [1.5, 1.0, 2.0]).unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let path = dir.path().join(name);
            save_nifti(&v, &path).unwrap();
            let (back, seg) = load_nifti(&path).unwrap();
            assert!(seg.is_none());
            assert_eq!(back, v);
        }
    }

    #[test]
    fn zeros_have_flat_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.nii");
        save_nifti(&Volume::zeros([8, 8, 8]), &path).unwrap();
        let (v, _) = load_nifti(&path).unwrap();
        assert_eq!(v.shape(), [8, 8, 8]);
        assert_eq!(v.intensity_range(), (0.0, 0.0));
    }

    #[test]
    fn labels_come_back_as_segmentation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nii.gz");
        let s = SegmentationMap::new(Array3::from_shape_fn((4, 5, 6), |(i, j, k)| ((i + j + k) % 3) as i32)).unwrap();
        save_nifti(&s, &path).unwrap();
        let (v, seg) = load_nifti(&path).unwrap();
        assert_eq!(seg.unwrap(), s);
        assert_eq!(v.data()[[1, 1, 0]], 2.0);
    }

    #[test]
    fn field_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.nii");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Array4::from_shape_fn((3, 8, 8, 8), |_| rng.gen_range(-2.0..2.0));
        let f = DisplacementField::new(u).unwrap();
        save_nifti(&f, &path).unwrap();
        assert_eq!(load_field(&path).unwrap(), f);
        assert!(matches!(load_nifti(&path), Err(Error::UnsupportedDims(4))));
    }

    #[test]
    fn two_dimensional_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.nii");
        let img = ndarray::Array2::<f64>::zeros((5, 5));
        WriterOptions::new(&path).write_nifti(&img).unwrap();
        assert!(matches!(load_nifti(&path), Err(Error::UnsupportedDims(2))));
    }

    #[test]
    fn missing_and_unwritable() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_nifti(dir.path().join("nope.nii")),
            Err(Error::MissingFile(_))
        ));
        let bad = dir.path().join("no_such_dir").join("v.nii");
        assert!(matches!(
            save_nifti(&Volume::zeros([2, 2, 2]), &bad),
            Err(Error::IoFailure(_))
        ));
    }

    #[test]
    fn garbage_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nii");
        std::fs::write(&path, vec![7u8; 400]).unwrap();
        assert!(matches!(load_nifti(&path), Err(Error::MalformedHeader(_))));
    }
}
