//! Unsupervised deformable 3D registration with a Transformer-UNet.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod par;
pub mod train;
pub mod transformer;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use volume::{SegmentationMap, Shape3, Volume, VolumePair};
pub use warp::DisplacementField;
