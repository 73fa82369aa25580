//! Volume ingestion, conditioning, synthetic pairs, augmentation and patching.

pub mod augment;
pub mod nifti_io;
pub mod patches;
pub mod preprocess;
pub mod synthetic;

pub use augment::{random_rotation, rotate_pair};
pub use nifti_io::{load_field, load_nifti, save_nifti};
pub use patches::{extract_patch_grid, Patch};
pub use preprocess::{crop_or_pad, minmax_normalize};
pub use synthetic::{generate_atlas_pairs, generate_synthetic_pair, SyntheticSpec};
