//! Neural-network building blocks: GEMM-backed convolutions, layers, and a
//! reverse-mode tape that records them.

pub mod conv;
pub mod gemm;
pub mod ops;
pub mod tape;
