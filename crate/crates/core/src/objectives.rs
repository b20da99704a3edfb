//! Pre-training objectives over restored token grids.
//!
//! All losses work on unit-normalized embeddings, so every dot product is a
//! cosine similarity. Token batches are laid out `(B, 2, M, P)`: volume,
//! view (0 = rotated-then-restored, 1 = masked), position, feature.

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::params::{gelu, init_linear, l2_normalize, linear, ParamStore};

/// Logit added on the diagonal so an anchor never counts itself.
const SELF_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    /// Token contrastive loss.
    Simtrot,
    /// Token contrastive loss with weighted same-position negatives.
    SimtrotW,
    /// BYOL-style token regression against an EMA target.
    Btrot,
    /// NT-Xent on spatially pooled embeddings.
    GlobalSimclr,
}

impl Framework {
    pub fn name(self) -> &'static str {
        match self {
            Framework::Simtrot => "simtrot",
            Framework::SimtrotW => "simtrot_w",
            Framework::Btrot => "btrot",
            Framework::GlobalSimclr => "global_simclr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simtrot" => Ok(Framework::Simtrot),
            "simtrot_w" => Ok(Framework::SimtrotW),
            "btrot" => Ok(Framework::Btrot),
            "global_simclr" => Ok(Framework::GlobalSimclr),
            other => Err(Error::Config(format!("unknown framework `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    /// Weight on same-position negatives from other volumes.
    pub w: f64,
    pub symmetrize: bool,
    /// Output width of the projection and prediction heads.
    pub proj_dim: usize,
    /// EMA momentum of the BYOL target branch.
    pub ema_momentum: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            w: 5.0,
            symmetrize: true,
            proj_dim: 32,
            ema_momentum: 0.996,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau = {} must be positive", self.tau)));
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("loss.w = {} must be non-negative", self.w)));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("loss.proj_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "loss.ema_momentum = {} must lie in [0, 1]",
                self.ema_momentum
            )));
        }
        Ok(())
    }
}

/// Two-layer per-token MLP (`in → 2·in → out`), applied position-wise.
pub fn init_head(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    init_linear(store, &format!("{prefix}.fc1"), in_dim, 2 * in_dim, rng)?;
    init_linear(store, &format!("{prefix}.fc2"), 2 * in_dim, out_dim, rng)
}

pub fn apply_head(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let hidden = gelu(&linear(x, store, &format!("{prefix}.fc1"))?)?;
    linear(&hidden, store, &format!("{prefix}.fc2"))
}

/// Unit-norm token embeddings of both views, `(B, 2, M, P)`.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub z: Tensor,
}

impl TokenBatch {
    /// Normalize and stack per-view `(B, M, P)` embeddings. `restored` must
    /// already be back in the frame of `masked`.
    pub fn from_views(restored: &Tensor, masked: &Tensor) -> Result<Self> {
        if restored.dims() != masked.dims() {
            return Err(Error::ShapeMismatch(format!(
                "views {:?} and {:?} differ",
                restored.dims(),
                masked.dims()
            )));
        }
        let z = Tensor::stack(&[l2_normalize(restored)?, l2_normalize(masked)?], 1)?;
        Ok(Self { z })
    }

    /// Wrap an already normalized `(B, 2, M, P)` tensor.
    pub fn from_normalized(z: Tensor) -> Result<Self> {
        let dims = z.dims();
        if dims.len() != 4 || dims[1] != 2 {
            return Err(Error::ShapeMismatch(format!("token batch must be (B, 2, M, P), got {dims:?}")));
        }
        Ok(Self { z })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.z.dims();
        (d[0], d[2], d[3])
    }

    fn flat(&self) -> Result<Tensor> {
        let (b, m, p) = self.dims();
        Ok(self.z.reshape((b * 2 * m, p))?)
    }

    /// Per-row positive logit `z · ẑ / τ`, rows in `(B, 2, M)` order.
    fn positive_logits(&self, tau: f64) -> Result<Tensor> {
        let swapped = Tensor::cat(&[self.z.narrow(1, 1, 1)?, self.z.narrow(1, 0, 1)?], 1)?;
        Ok(((&self.z * swapped)?.sum(D::Minus1)?.flatten_all()? / tau)?)
    }

    fn check(&self) -> Result<()> {
        let (b, m, _) = self.dims();
        if b * m == 0 {
            return Err(Error::DegenerateBatch("token batch is empty".into()));
        }
        Ok(())
    }
}

fn constant(values: Vec<f64>, shape: (usize, usize), dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean over the anchors in use: all rows, or only rotated-view rows.
fn mean_over_anchors(per_row: &Tensor, b: usize, m: usize, symmetrize: bool) -> Result<Tensor> {
    if symmetrize {
        Ok(per_row.mean_all()?)
    } else {
        Ok(per_row.reshape((b, 2, m))?.narrow(1, 0, 1)?.mean_all()?)
    }
}

/// Token-wise NT-Xent. For each anchor the denominator runs over every other
/// token of the batch (both views, all volumes, all positions), the positive
/// included; the positive is the same volume and position in the other view.
pub fn token_contrastive_loss(tb: &TokenBatch, tau: f64, symmetrize: bool) -> Result<Tensor> {
    tb.check()?;
    let (b, m, _) = tb.dims();
    let n = 2 * b * m;
    let z = tb.flat()?;
    let logits = (z.matmul(&z.t()?)? / tau)?;
    let diag: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { SELF_LOGIT } else { 0.0 })
        .collect();
    let logits = (logits + constant(diag, (n, n), z.dtype())?)?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + &max)?.flatten_all()?;
    let per_row = (lse - tb.positive_logits(tau)?)?;
    mean_over_anchors(&per_row, b, m, symmetrize)
}

/// Denominator weights for [`weighted_token_contrastive_loss`]: zero on the
/// anchor itself, `w` on same-position tokens of other volumes (both views),
/// one everywhere else.
pub fn attention_weights(b: usize, m: usize, w: f64) -> Vec<f64> {
    let n = 2 * b * m;
    let mut out = vec![1.0; n * n];
    for row in 0..n {
        let (vi, pi) = (row / (2 * m), row % m);
        for col in 0..n {
            let (vj, pj) = (col / (2 * m), col % m);
            out[row * n + col] = if row == col {
                0.0
            } else if pi == pj && vi != vj {
                w
            } else {
                1.0
            };
        }
    }
    out
}

/// Token contrastive loss whose denominator up-weights, by `w`, the
/// similarity between an anchor and tokens at the same position in other
/// volumes. At `w = 1` it coincides with [`token_contrastive_loss`].
pub fn weighted_token_contrastive_loss(tb: &TokenBatch, tau: f64, w: f64, symmetrize: bool) -> Result<Tensor> {
    tb.check()?;
    let (b, m, _) = tb.dims();
    let n = 2 * b * m;
    let z = tb.flat()?;
    let logits = (z.matmul(&z.t()?)? / tau)?;
    let weights = constant(attention_weights(b, m, w), (n, n), z.dtype())?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let denom = (logits.broadcast_sub(&max)?.exp()? * weights)?.sum_keepdim(D::Minus1)?;
    let log_denom = (denom.log()? + &max)?.flatten_all()?;
    let per_row = (log_denom - tb.positive_logits(tau)?)?;
    mean_over_anchors(&per_row, b, m, symmetrize)
}

/// Mean squared distance between unit-normalized online predictions and
/// target projections, both `(B, M, P)`. No gradient reaches `target`.
pub fn byol_regression(prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    if prediction.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            prediction.dims(),
            target.dims()
        )));
    }
    let p = l2_normalize(prediction)?;
    let t = l2_normalize(&target.detach())?;
    Ok((p - t)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// One direction of the BYOL token loss: `pred(g_θ(online))` against
/// `g_ξ(target)`. `online_heads` holds `proj.*` and `pred.*`, `target_heads`
/// holds `proj.*`.
pub fn byol_token_loss(
    online: &TokenGrid,
    target: &TokenGrid,
    online_heads: &ParamStore,
    target_heads: &ParamStore,
) -> Result<Tensor> {
    if online.features.dims() != target.features.dims() {
        return Err(Error::ShapeMismatch(format!(
            "online grid {:?} vs target grid {:?}",
            online.features.dims(),
            target.features.dims()
        )));
    }
    let projected = apply_head(&online.flatten_positions()?, online_heads, "proj")?;
    let prediction = apply_head(&projected, online_heads, "pred")?;
    let target = apply_head(&target.flatten_positions()?.detach(), target_heads, "proj")?;
    byol_regression(&prediction, &target)
}

/// Mean over positions: `(B, D, H, W, C)` → `(B, C)`.
pub fn pool_tokens(g: &TokenGrid) -> Result<Tensor> {
    Ok(g.flatten_positions()?.mean(1)?)
}

/// NT-Xent over `2B` volume-level embeddings given as `(B, 2, P)`.
pub fn global_simclr_loss(embeddings: &Tensor, tau: f64, symmetrize: bool) -> Result<Tensor> {
    let (b, v, p) = embeddings.dims3()?;
    if v != 2 {
        return Err(Error::ShapeMismatch(format!("expected (B, 2, P), got {:?}", embeddings.dims())));
    }
    if b < 2 {
        return Err(Error::DegenerateBatch(format!("global contrastive loss needs B >= 2, got {b}")));
    }
    let z = l2_normalize(embeddings)?.reshape((b, 2, 1, p))?;
    token_contrastive_loss(&TokenBatch::from_normalized(z)?, tau, symmetrize)
}

/// Cosine statistics of token embeddings across a batch of volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// Mean cosine between tokens at the same position in different volumes.
    pub cross_volume_same_position: f64,
    /// Mean cosine between tokens at different positions of one volume.
    pub within_volume_cross_position: f64,
    /// Mean cosine between the two views of each token, when both are given.
    pub positive_pair: Option<f64>,
    /// Total variance across volumes of the normalized embedding at one
    /// position, averaged over positions (0 when all volumes agree).
    pub position_variance: f64,
}

impl CollapseReport {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("cross_volume_same_position", self.cross_volume_same_position),
            ("within_volume_cross_position", self.within_volume_cross_position),
        ];
        if let Some(p) = self.positive_pair {
            out.push(("positive_pair", p));
        }
        out.push(("position_variance", self.position_variance));
        out
    }
}

fn normalized_rows(x: &Tensor) -> Result<(usize, usize, usize, Vec<f64>)> {
    let (b, m, p) = x.dims3()?;
    let mut data = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    for row in data.chunks_mut(p) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok((b, m, p, data))
}

/// Collapse diagnostics for `(B, M, P)` tokens `z` and optionally their
/// second view `z_hat` (same layout, same frame).
pub fn collapse_metrics(z: &Tensor, z_hat: Option<&Tensor>) -> Result<CollapseReport> {
    let (b, m, p, u) = normalized_rows(z)?;
    if b < 2 || m < 2 {
        return Err(Error::DegenerateBatch(format!(
            "collapse metrics need at least 2 volumes and 2 positions, got {b} x {m}"
        )));
    }
    let at = |i: usize, pos: usize| &u[(i * m + pos) * p..(i * m + pos + 1) * p];
    let sq_norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();

    // Sum over ordered pairs of unit vectors = |Σu|² − Σ|u|².
    let mut cross = 0.0;
    let mut variance = 0.0;
    for pos in 0..m {
        let mut sum = vec![0.0; p];
        let mut self_sq = 0.0;
        for i in 0..b {
            let v = at(i, pos);
            self_sq += sq_norm(v);
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        cross += (sq_norm(&sum) - self_sq) / (b * (b - 1)) as f64;
        let mean_sq = sq_norm(&sum) / (b * b) as f64;
        variance += self_sq / b as f64 - mean_sq;
    }
    let mut within = 0.0;
    for i in 0..b {
        let mut sum = vec![0.0; p];
        let mut self_sq = 0.0;
        for pos in 0..m {
            let v = at(i, pos);
            self_sq += sq_norm(v);
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        within += (sq_norm(&sum) - self_sq) / (m * (m - 1)) as f64;
    }
    let positive_pair = match z_hat {
        Some(zh) => {
            if zh.dims() != z.dims() {
                return Err(Error::ShapeMismatch(format!("views {:?} and {:?} differ", z.dims(), zh.dims())));
            }
            let (_, _, _, v) = normalized_rows(zh)?;
            let dots: f64 = u
                .chunks(p)
                .zip(v.chunks(p))
                .map(|(a, c)| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>())
                .sum();
            Some(dots / (b * m) as f64)
        }
        None => None,
    };
    Ok(CollapseReport {
        cross_volume_same_position: cross / m as f64,
        within_volume_cross_position: within / b as f64,
        positive_pair,
        position_variance: variance / m as f64,
    })
}
