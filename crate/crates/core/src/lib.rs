//! Token-level contrastive pre-training for 3D windowed-attention encoders.
//!
//! One view of each volume is rotated/flipped before encoding and its output
//! token grid is restored afterwards, so tokens at the same index in both
//! views describe the same region. Token-wise contrastive (SimCLR-style, with
//! an optional extra weight on same-position cross-volume negatives) and
//! BYOL-style objectives are provided, together with collapse diagnostics and
//! a segmentation fine-tuning harness on synthetic volumes.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod params;
pub mod plot;
pub mod report;
pub mod spatial;
pub mod training;

pub use error::{Error, Result};
