//! Pre-training and fine-tuning loops, run records and ablation grids.
//!
//! All randomness of a run derives from `RunConfig::seed` through separate
//! ChaCha streams, one per consumer, so that e.g. changing the augmentation
//! leaves parameter initialization untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Volume;
use crate::error::{Error, Result};

pub mod ablation;
pub mod config;
pub mod finetune;
pub mod optim;
pub mod pretrain;
pub mod record;

pub use ablation::{grid_points, run_ablation_grid, AblationAxes};
pub use config::{apply_override, FinetuneConfig, OptimConfig, Precision, RunConfig, PRECISION_ENV};
pub use finetune::{evaluate_volumes, finetune_on, init_segmentation_model, segmentation_batch_loss};
pub use optim::{poly_lr, Sgd};
pub use pretrain::{collapse_eval, pretrain_loss, pretrain_on, PretrainModel, Pretrainer};
pub use record::{read_records, read_summary, Record, RunOutcome, Summary};

pub const AUG_STREAM: u64 = 1;
pub const ORDER_STREAM: u64 = 2;
pub const HEAD_STREAM: u64 = 3;
pub const EVAL_STREAM: u64 = 4;
pub const DECODER_STREAM: u64 = 5;
pub const FINETUNE_ORDER_STREAM: u64 = 6;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Every volume must match the encoder's input geometry.
pub fn check_volumes(cfg: &RunConfig, volumes: &[Volume]) -> Result<()> {
    let e = &cfg.encoder;
    for v in volumes {
        if v.shape != e.input_shape || v.channels != e.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "volume {} is {}x{:?}, encoder expects {}x{:?}",
                v.id, v.channels, v.shape, e.in_channels, e.input_shape
            )));
        }
    }
    Ok(())
}
