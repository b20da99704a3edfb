//! U-shaped segmentation decoder appended to an encoder for fine-tuning.
//!
//! Each upsampling step is a stride-2 transposed convolution with a 2×2×2
//! kernel, which on a channels-last grid is a per-token linear map to eight
//! children followed by a pixel shuffle. The decoder walks back up the
//! encoder stages, fusing every stage's token grid as a skip connection,
//! then expands by the patch size to voxel resolution, fuses the raw input
//! and classifies each voxel with a 1×1×1 head.

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::params::{gelu, init_linear, linear, softmax_last, ParamStore};

pub const DECODER_PREFIX: &str = "decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Feature width at voxel resolution.
    pub voxel_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { voxel_dim: 8 }
    }
}

/// `(B, d, h, w, f0·f1·f2·C)` → `(B, d·f0, h·f1, w·f2, C)`.
pub fn pixel_shuffle(x: &Tensor, factor: [usize; 3]) -> Result<Tensor> {
    let (b, d, h, w, k) = x.dims5()?;
    let [f0, f1, f2] = factor;
    let n = f0 * f1 * f2;
    if k % n != 0 {
        return Err(Error::ShapeMismatch(format!("{k} channels not divisible by {n}")));
    }
    let c = k / n;
    Ok(x.reshape(vec![b, d, h, w, f0, f1, f2, c])?
        .permute(vec![0, 1, 4, 2, 5, 3, 6, 7])?
        .reshape((b, d * f0, h * f1, w * f2, c))?)
}

pub fn init_decoder(
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    n_classes: usize,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let p = DECODER_PREFIX;
    let levels = enc.n_levels();
    for s in (1..levels).rev() {
        let (cin, cout) = (enc.dim(s), enc.dim(s - 1));
        init_linear(store, &format!("{p}.up.{s}"), cin, 8 * cout, rng)?;
        init_linear(store, &format!("{p}.fuse.{s}"), 2 * cout, cout, rng)?;
    }
    let patch: usize = enc.patch_size.iter().product();
    let c0 = enc.dim(0);
    let cv = dec.voxel_dim;
    init_linear(store, &format!("{p}.up.0"), c0, patch * cv, rng)?;
    init_linear(store, &format!("{p}.fuse.0"), cv + enc.in_channels, cv, rng)?;
    init_linear(store, &format!("{p}.head"), cv, n_classes + 1, rng)
}

/// Per-voxel logits `(B, D, H, W, K+1)` from the encoder's stage grids and
/// the `(B, C, D, H, W)` input.
pub fn decode(enc: &EncoderConfig, out: &EncoderOutput, x: &Tensor, store: &ParamStore) -> Result<Tensor> {
    let p = DECODER_PREFIX;
    let levels = enc.n_levels();
    let mut h = out.tokens.features.clone();
    for s in (1..levels).rev() {
        let up = pixel_shuffle(&linear(&h, store, &format!("{p}.up.{s}"))?, [2, 2, 2])?;
        let skip = &out.stages[s - 1].features;
        h = gelu(&linear(&Tensor::cat(&[&up, skip], D::Minus1)?, store, &format!("{p}.fuse.{s}"))?)?;
    }
    let up = pixel_shuffle(&linear(&h, store, &format!("{p}.up.0"))?, enc.patch_size)?;
    let voxels = x.permute((0, 2, 3, 4, 1))?;
    let fused = gelu(&linear(&Tensor::cat(&[&up, &voxels], D::Minus1)?, store, &format!("{p}.fuse.0"))?)?;
    linear(&fused, store, &format!("{p}.head"))
}

/// One-hot `(B, D, H, W, K+1)` targets.
pub fn one_hot(labels: &[&[u8]], shape: [usize; 3], n_classes: usize, dtype: DType) -> Result<Tensor> {
    let k = n_classes + 1;
    let n: usize = shape.iter().product();
    let mut data = vec![0.0f64; labels.len() * n * k];
    for (b, l) in labels.iter().enumerate() {
        if l.len() != n {
            return Err(Error::ShapeMismatch(format!("label of {} voxels, expected {n}", l.len())));
        }
        for (i, &c) in l.iter().enumerate() {
            if c as usize >= k {
                return Err(Error::ShapeMismatch(format!("label {c} exceeds {n_classes} classes")));
            }
            data[(b * n + i) * k + c as usize] = 1.0;
        }
    }
    let [d, h, w] = shape;
    Ok(Tensor::from_vec(data, (labels.len(), d, h, w, k), &Device::Cpu)?.to_dtype(dtype)?)
}

const DICE_SMOOTH: f64 = 1e-5;

/// Mean voxelwise cross-entropy plus `1 −` mean soft Dice over all `K+1`
/// classes. Returns `(total, cross_entropy, dice_loss)`.
pub fn segmentation_loss(logits: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if logits.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.dims(),
            target.dims()
        )));
    }
    let k = logits.dim(D::Minus1)?;
    let flat = logits.reshape(((), k))?;
    let y = target.reshape(((), k))?;
    let max = flat.max_keepdim(D::Minus1)?.detach();
    let shifted = flat.broadcast_sub(&max)?;
    let log_z = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_p = shifted.broadcast_sub(&log_z)?;
    let ce = (log_p * &y)?.sum(D::Minus1)?.mean_all()?.neg()?;
    let prob = softmax_last(&flat)?;
    let inter = (&prob * &y)?.sum(0)?;
    let denom = (prob.sum(0)? + y.sum(0)?)?;
    let dice = ((inter * 2.0)? + DICE_SMOOTH)?.div(&(denom + DICE_SMOOTH)?)?;
    let dice_loss = dice.mean_all()?.affine(-1.0, 1.0)?;
    Ok(((&ce + &dice_loss)?, ce, dice_loss))
}

/// Arg-max label per voxel for a batch of logits, one `Vec<u8>` per sample.
pub fn predict_labels(logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let b = logits.dim(0)?;
    let idx = logits.argmax(D::Minus1)?.reshape((b, ()))?;
    Ok(idx
        .to_vec2::<u32>()?
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as u8).collect())
        .collect())
}
