//! Point-cloud anomaly detection by corrective-force prediction.
//!
//! Normal training clouds are damaged with synthetic, physically motivated
//! defects; a sparse-voxel network learns the per-point force that undoes
//! the damage, and the magnitude of that force is the anomaly score.

pub mod cli;
pub mod config;
pub mod dagen;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod scoring;
pub mod synth;
pub mod training;
