//! Multi-modal brain-lesion segmentation at desk scale: four independent
//! residual encoders fused by element-wise maximum at every skip level, a
//! shared decoder, contrastive regularization across modality pairs, and
//! missing-modality inference — with NIfTI-lite volume I/O, synthetic
//! phantoms, Dice/HD95 metrics, and a deterministic training loop.

pub mod error;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod gradcore;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod niftilite;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
