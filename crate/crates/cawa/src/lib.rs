//! Compression-aware neural fields: multi-resolution hash-grid features and
//! small decoder networks trained under a joint rate-distortion objective,
//! with bit-exact quantization and an entropy-coded container for export.

// Numeric kernels index several buffers in lockstep; indexed loops stay.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod grid;
pub mod mlp;
pub mod objective;
pub mod ppm;
pub mod render;
pub mod trainer;
