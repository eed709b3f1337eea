//! Grad-CAM guided channel-spatial attention, end to end: a small reverse-mode
//! autodiff engine, the attention module, the guidance loss, a synthetic
//! fine-grained dataset with ground-truth part masks, and a training harness
//! for ablations and λ sweeps.

pub mod attention;
pub mod checkpoint;
pub mod config;
mod container;
pub mod data;
pub mod error;
pub mod exec;
pub mod guidance;
pub mod model;
pub mod pnm;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use container::sha256_hex;
pub use error::{Error, Result};
