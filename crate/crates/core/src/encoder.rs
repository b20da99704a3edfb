//! Toy-scale 3D transformer encoders.
//!
//! Activations are kept channels-last: a token grid is a `(B, D, H, W, C)`
//! tensor. The hierarchical variant follows the Swin layout (windowed
//! attention, alternating half-window cyclic shifts, 2×2×2 patch merging
//! between stages); the flat variant is a single stage of global attention
//! over large patches, as in UNETR.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::params::{gelu, init_layer_norm, init_linear, layer_norm, linear, softmax_last, Init, ParamStore};

/// Additive logit for token pairs that straddle a cyclic-shift seam.
const SHIFT_MASK_LOGIT: f64 = -100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Flat,
    Hierarchical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub input_shape: [usize; 3],
    pub patch_size: [usize; 3],
    pub n_stages: usize,
    pub blocks_per_stage: usize,
    /// Width of stage 0; doubles at every merge.
    pub embed_dim: usize,
    pub window_size: [usize; 3],
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub shifted_windows: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::hierarchical()
    }
}

impl EncoderConfig {
    pub fn hierarchical() -> Self {
        Self {
            variant: Variant::Hierarchical,
            in_channels: 1,
            input_shape: [32, 32, 32],
            patch_size: [2, 2, 2],
            n_stages: 3,
            blocks_per_stage: 2,
            embed_dim: 16,
            window_size: [4, 4, 4],
            n_heads: 2,
            mlp_ratio: 4,
            shifted_windows: true,
        }
    }

    pub fn flat() -> Self {
        Self {
            variant: Variant::Flat,
            in_channels: 1,
            input_shape: [32, 32, 32],
            patch_size: [8, 8, 8],
            n_stages: 1,
            blocks_per_stage: 4,
            embed_dim: 48,
            window_size: [4, 4, 4],
            n_heads: 2,
            mlp_ratio: 4,
            shifted_windows: false,
        }
    }

    pub fn n_levels(&self) -> usize {
        match self.variant {
            Variant::Flat => 1,
            Variant::Hierarchical => self.n_stages,
        }
    }

    pub fn token_shape(&self, stage: usize) -> [usize; 3] {
        let f = 1 << stage;
        [0, 1, 2].map(|a| self.input_shape[a] / self.patch_size[a] / f)
    }

    pub fn dim(&self, stage: usize) -> usize {
        match self.variant {
            Variant::Flat => self.embed_dim,
            Variant::Hierarchical => self.embed_dim << stage,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.dim(self.n_levels() - 1)
    }

    pub fn out_shape(&self) -> [usize; 3] {
        self.token_shape(self.n_levels() - 1)
    }

    /// Voxel extent covered by one token at each stage, finest first.
    pub fn patch_sizes(&self) -> Vec<[usize; 3]> {
        (0..self.n_levels())
            .map(|s| self.patch_size.map(|p| p << s))
            .collect()
    }

    /// Voxels per output token along each axis.
    pub fn downsampling(&self) -> [usize; 3] {
        *self.patch_sizes().last().unwrap()
    }

    /// Window actually used at `stage`: clamped to the grid extent.
    pub fn effective_window(&self, stage: usize) -> [usize; 3] {
        let grid = self.token_shape(stage);
        [0, 1, 2].map(|a| self.window_size[a].min(grid[a]))
    }

    /// Cyclic shift of the odd blocks at `stage` (zero on axes with one window).
    pub fn shift(&self, stage: usize) -> [usize; 3] {
        let grid = self.token_shape(stage);
        let win = self.effective_window(stage);
        [0, 1, 2].map(|a| {
            if self.shifted_windows && win[a] < grid[a] {
                win[a] / 2
            } else {
                0
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.in_channels == 0 || self.embed_dim == 0 || self.n_heads == 0 || self.mlp_ratio == 0 {
            return bad("in_channels, embed_dim, n_heads and mlp_ratio must be positive".into());
        }
        if self.n_stages == 0 || self.blocks_per_stage == 0 {
            return bad("n_stages and blocks_per_stage must be positive".into());
        }
        if self.variant == Variant::Flat && self.n_stages != 1 {
            return bad("the flat variant has exactly one stage".into());
        }
        if self.patch_size.contains(&0) || self.window_size.contains(&0) {
            return bad("patch and window extents must be positive".into());
        }
        for a in 0..3 {
            if self.input_shape[a] % self.patch_size[a] != 0 {
                return bad(format!(
                    "input {:?} not divisible by patch {:?}",
                    self.input_shape, self.patch_size
                ));
            }
        }
        let tokens = self.token_shape(0);
        let f = 1 << (self.n_levels() - 1);
        if tokens.iter().any(|&n| n % f != 0 || n == 0) {
            return bad(format!(
                "token grid {tokens:?} cannot be merged {} times",
                self.n_levels() - 1
            ));
        }
        for s in 0..self.n_levels() {
            if self.dim(s) % self.n_heads != 0 {
                return bad(format!("dim {} at stage {s} not divisible by {} heads", self.dim(s), self.n_heads));
            }
            let grid = self.token_shape(s);
            let win = self.effective_window(s);
            if (0..3).any(|a| grid[a] % win[a] != 0) {
                return Err(Error::WindowMismatch { window: win, grid });
            }
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let c0 = self.embed_dim;
        let p: usize = self.patch_size.iter().product();
        let m0: usize = self.token_shape(0).iter().product();
        let mut n = self.in_channels * p * c0 + c0 + m0 * c0;
        for s in 0..self.n_levels() {
            let c = self.dim(s);
            let hidden = self.mlp_ratio * c;
            let block = 2 * c + (c * 3 * c + 3 * c) + (c * c + c) + 2 * c + (c * hidden + hidden) + (hidden * c + c);
            n += self.blocks_per_stage * block;
            if s + 1 < self.n_levels() {
                n += 8 * c * 2 * c + 2 * c;
            }
        }
        n + 2 * self.out_dim()
    }
}

/// Per-position token embeddings, `(B, D, H, W, C)`.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub features: Tensor,
    pub stage: usize,
}

impl TokenGrid {
    pub fn batch(&self) -> usize {
        self.features.dims()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let d = self.features.dims();
        [d[1], d[2], d[3]]
    }

    pub fn channels(&self) -> usize {
        self.features.dims()[4]
    }

    /// `(B, M, C)` with positions in row-major `(D, H, W)` order.
    pub fn flatten_positions(&self) -> Result<Tensor> {
        let [d, h, w] = self.spatial();
        Ok(self.features.reshape((self.batch(), d * h * w, self.channels()))?)
    }
}

/// Encoder outputs: every stage's token grid (before merging) and the final
/// normalized tokens.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub stages: Vec<TokenGrid>,
    pub tokens: TokenGrid,
}

/// Stack volumes into a `(B, C, D, H, W)` tensor.
pub fn volumes_to_tensor(volumes: &[&Volume], dtype: DType) -> Result<Tensor> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty volume batch".into()))?;
    let mut data = Vec::with_capacity(volumes.len() * first.intensities.len());
    for v in volumes {
        if v.shape != first.shape || v.channels != first.channels {
            return Err(Error::ShapeMismatch(format!(
                "volume {} has shape {}x{:?}, expected {}x{:?}",
                v.id, v.channels, v.shape, first.channels, first.shape
            )));
        }
        data.extend_from_slice(&v.intensities);
    }
    let [d, h, w] = first.shape;
    Ok(Tensor::from_vec(data, (volumes.len(), first.channels, d, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub struct Encoder<'a> {
    pub config: &'a EncoderConfig,
    pub store: &'a ParamStore,
    pub prefix: &'a str,
    pub check_finite: bool,
}

/// Allocate and initialize every encoder parameter under `prefix`.
pub fn init_encoder(
    cfg: &EncoderConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let p: usize = cfg.patch_size.iter().product();
    let c0 = cfg.embed_dim;
    init_linear(store, &format!("{prefix}.patch_embed"), cfg.in_channels * p, c0, rng)?;
    let [d, h, w] = cfg.token_shape(0);
    store.init(format!("{prefix}.pos_embed"), &[d, h, w, c0], Init::Normal(0.02), rng)?;
    for s in 0..cfg.n_levels() {
        let c = cfg.dim(s);
        for b in 0..cfg.blocks_per_stage {
            let pre = format!("{prefix}.stages.{s}.blocks.{b}");
            init_layer_norm(store, &format!("{pre}.norm1"), c, rng)?;
            init_linear(store, &format!("{pre}.attn.qkv"), c, 3 * c, rng)?;
            init_linear(store, &format!("{pre}.attn.proj"), c, c, rng)?;
            init_layer_norm(store, &format!("{pre}.norm2"), c, rng)?;
            init_linear(store, &format!("{pre}.mlp.fc1"), c, cfg.mlp_ratio * c, rng)?;
            init_linear(store, &format!("{pre}.mlp.fc2"), cfg.mlp_ratio * c, c, rng)?;
        }
        if s + 1 < cfg.n_levels() {
            init_linear(store, &format!("{prefix}.stages.{s}.merge"), 8 * c, 2 * c, rng)?;
        }
    }
    init_layer_norm(store, &format!("{prefix}.norm"), cfg.out_dim(), rng)
}

/// Fresh encoder parameters from a seed.
pub fn new_encoder_state(cfg: &EncoderConfig, dtype: DType, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new(dtype);
    init_encoder(cfg, &mut store, "encoder", &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(store)
}

/// `(B, C, D, H, W)` voxels to `(B, d, h, w, C·p₀p₁p₂)` patch vectors; each
/// vector is the block flattened channel-major, then depth, height, width.
pub fn patchify(x: &Tensor, patch: [usize; 3]) -> Result<Tensor> {
    let (b, c, d, h, w) = x.dims5()?;
    let [p0, p1, p2] = patch;
    if d % p0 != 0 || h % p1 != 0 || w % p2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "volume {:?} not divisible by patch {patch:?}",
            [d, h, w]
        )));
    }
    let (gd, gh, gw) = (d / p0, h / p1, w / p2);
    Ok(x.reshape(vec![b, c, gd, p0, gh, p1, gw, p2])?
        .permute(vec![0, 2, 4, 6, 1, 3, 5, 7])?
        .reshape((b, gd, gh, gw, c * p0 * p1 * p2))?)
}

/// Linear patch projection plus the shared per-position embedding.
pub fn patch_partition(x: &Tensor, store: &ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<TokenGrid> {
    let (_, c, d, h, w) = x.dims5()?;
    if c != cfg.in_channels || [d, h, w] != cfg.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "input {c}x{:?} does not match encoder input {}x{:?}",
            [d, h, w],
            cfg.in_channels,
            cfg.input_shape
        )));
    }
    let patches = patchify(x, cfg.patch_size)?;
    let tokens = linear(&patches, store, &format!("{prefix}.patch_embed"))?;
    let pos = store.get(&format!("{prefix}.pos_embed"))?;
    Ok(TokenGrid {
        features: tokens.broadcast_add(pos)?,
        stage: 0,
    })
}

/// Fuse each 2×2×2 neighbourhood into one token: children are concatenated
/// in `(dz, dy, dx)` order (channels fastest) and mapped linearly to twice the
/// width.
pub fn patch_merge(g: &TokenGrid, store: &ParamStore, prefix: &str) -> Result<TokenGrid> {
    let (b, d, h, w, c) = g.features.dims5()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddShape([d, h, w]));
    }
    let children = g
        .features
        .reshape(vec![b, d / 2, 2, h / 2, 2, w / 2, 2, c])?
        .permute(vec![0, 1, 3, 5, 2, 4, 6, 7])?
        .reshape((b, d / 2, h / 2, w / 2, 8 * c))?;
    Ok(TokenGrid {
        features: linear(&children, store, prefix)?,
        stage: g.stage + 1,
    })
}

/// `(B, D, H, W, C)` → `(B · nW, N, C)`, windows in row-major order.
pub fn window_partition(x: &Tensor, win: [usize; 3]) -> Result<Tensor> {
    let (b, d, h, w, c) = x.dims5()?;
    let [w0, w1, w2] = win;
    if d % w0 != 0 || h % w1 != 0 || w % w2 != 0 {
        return Err(Error::WindowMismatch {
            window: win,
            grid: [d, h, w],
        });
    }
    Ok(x.reshape(vec![b, d / w0, w0, h / w1, w1, w / w2, w2, c])?
        .permute(vec![0, 1, 3, 5, 2, 4, 6, 7])?
        .reshape((b * (d / w0) * (h / w1) * (w / w2), w0 * w1 * w2, c))?)
}

pub fn window_reverse(windows: &Tensor, win: [usize; 3], batch: usize, grid: [usize; 3]) -> Result<Tensor> {
    let [d, h, w] = grid;
    let [w0, w1, w2] = win;
    let c = windows.dim(2)?;
    Ok(windows
        .reshape(vec![batch, d / w0, h / w1, w / w2, w0, w1, w2, c])?
        .permute(vec![0, 1, 4, 2, 5, 3, 6, 7])?
        .reshape((batch, d, h, w, c))?)
}

/// Cyclic roll of the three spatial axes by `-shift` (or `+shift` to undo).
pub fn roll_spatial(x: &Tensor, shift: [usize; 3], undo: bool) -> Result<Tensor> {
    let mut y = x.clone();
    for (a, &s) in shift.iter().enumerate() {
        if s != 0 {
            let s = s as i32;
            y = y.roll(if undo { s } else { -s }, a + 1)?;
        }
    }
    Ok(y)
}

/// Additive attention mask `(nW, N, N)` for windows of a shifted grid: token
/// pairs from different pre-shift regions are suppressed.
pub fn shifted_window_mask(grid: [usize; 3], win: [usize; 3], shift: [usize; 3], dtype: DType) -> Result<Tensor> {
    let region = |n: usize, w: usize, s: usize, i: usize| -> usize {
        if s == 0 {
            0
        } else if i < n - w {
            0
        } else if i < n - s {
            1
        } else {
            2
        }
    };
    let [d, h, w] = grid;
    let mut ids = vec![0usize; d * h * w];
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                ids[(i * h + j) * w + k] = region(d, win[0], shift[0], i) * 9
                    + region(h, win[1], shift[1], j) * 3
                    + region(w, win[2], shift[2], k);
            }
        }
    }
    let n_win = [d / win[0], h / win[1], w / win[2]];
    let n = win.iter().product::<usize>();
    let total = n_win.iter().product::<usize>();
    let mut mask = vec![0.0f64; total * n * n];
    for widx in 0..total {
        let wi = widx / (n_win[1] * n_win[2]);
        let wj = (widx / n_win[2]) % n_win[1];
        let wk = widx % n_win[2];
        let members: Vec<usize> = (0..n)
            .map(|t| {
                let ti = t / (win[1] * win[2]);
                let tj = (t / win[2]) % win[1];
                let tk = t % win[2];
                ids[((wi * win[0] + ti) * h + (wj * win[1] + tj)) * w + (wk * win[2] + tk)]
            })
            .collect();
        for (a, &ra) in members.iter().enumerate() {
            for (b, &rb) in members.iter().enumerate() {
                if ra != rb {
                    mask[(widx * n + a) * n + b] = SHIFT_MASK_LOGIT;
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (total, n, n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Multi-head self-attention inside each window of `(B · nW, N, C)`.
pub fn window_attention(
    windows: &Tensor,
    store: &ParamStore,
    prefix: &str,
    n_heads: usize,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (bw, n, c) = windows.dims3()?;
    let hd = c / n_heads;
    let qkv = linear(windows, store, &format!("{prefix}.qkv"))?
        .reshape((bw, n, 3, n_heads, hd))?
        .permute((2, 0, 3, 1, 4))?;
    let q = (qkv.get(0)?.contiguous()? * (1.0 / (hd as f64).sqrt()))?;
    let k = qkv.get(1)?.contiguous()?;
    let v = qkv.get(2)?.contiguous()?;
    let mut logits = q.matmul(&k.t()?.contiguous()?)?;
    if let Some(mask) = mask {
        let n_win = mask.dim(0)?;
        logits = logits
            .reshape((bw / n_win, n_win, n_heads, n, n))?
            .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
            .reshape((bw, n_heads, n, n))?;
    }
    let attn = softmax_last(&logits)?;
    let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
    linear(&out, store, &format!("{prefix}.proj"))
}

/// One pre-norm transformer block with (optionally shifted) window attention
/// and an MLP, both as residual branches.
pub fn windowed_attention(
    g: &TokenGrid,
    store: &ParamStore,
    prefix: &str,
    n_heads: usize,
    window: [usize; 3],
    shift: [usize; 3],
) -> Result<TokenGrid> {
    let x = &g.features;
    let (b, d, h, w, _) = x.dims5()?;
    let grid = [d, h, w];
    if (0..3).any(|a| window[a] == 0 || grid[a] % window[a] != 0) {
        return Err(Error::WindowMismatch { window, grid });
    }
    let shifted = shift.iter().any(|&s| s != 0);
    let normed = layer_norm(x, store, &format!("{prefix}.norm1"))?;
    let rolled = if shifted { roll_spatial(&normed, shift, false)? } else { normed };
    let mask = if shifted {
        Some(shifted_window_mask(grid, window, shift, x.dtype())?)
    } else {
        None
    };
    let attended = window_attention(
        &window_partition(&rolled, window)?,
        store,
        &format!("{prefix}.attn"),
        n_heads,
        mask.as_ref(),
    )?;
    let mut branch = window_reverse(&attended, window, b, grid)?;
    if shifted {
        branch = roll_spatial(&branch, shift, true)?;
    }
    let x = (x + branch)?;
    let hidden = gelu(&linear(
        &layer_norm(&x, store, &format!("{prefix}.norm2"))?,
        store,
        &format!("{prefix}.mlp.fc1"),
    )?)?;
    let x = (&x + linear(&hidden, store, &format!("{prefix}.mlp.fc2"))?)?;
    Ok(TokenGrid {
        features: x,
        stage: g.stage,
    })
}

fn ensure_finite(x: &Tensor, layer: &str) -> Result<()> {
    let s = x.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(layer.to_string()))
    }
}

impl<'a> Encoder<'a> {
    pub fn new(config: &'a EncoderConfig, store: &'a ParamStore, prefix: &'a str) -> Self {
        Self {
            config,
            store,
            prefix,
            check_finite: true,
        }
    }

    /// Run every stage on a `(B, C, D, H, W)` batch.
    pub fn forward(&self, x: &Tensor) -> Result<EncoderOutput> {
        let cfg = self.config;
        let p = self.prefix;
        let mut g = patch_partition(x, self.store, p, cfg)?;
        if self.check_finite {
            ensure_finite(&g.features, &format!("{p}.patch_embed"))?;
        }
        let mut stages = Vec::with_capacity(cfg.n_levels());
        for s in 0..cfg.n_levels() {
            let window = cfg.effective_window(s);
            let shift = cfg.shift(s);
            for b in 0..cfg.blocks_per_stage {
                let name = format!("{p}.stages.{s}.blocks.{b}");
                let block_shift = if b % 2 == 1 { shift } else { [0; 3] };
                g = windowed_attention(&g, self.store, &name, cfg.n_heads, window, block_shift)?;
                if self.check_finite {
                    ensure_finite(&g.features, &name)?;
                }
            }
            stages.push(g.clone());
            if s + 1 < cfg.n_levels() {
                g = patch_merge(&g, self.store, &format!("{p}.stages.{s}.merge"))?;
            }
        }
        let tokens = TokenGrid {
            features: layer_norm(&g.features, self.store, &format!("{p}.norm"))?,
            stage: g.stage,
        };
        if self.check_finite {
            ensure_finite(&tokens.features, &format!("{p}.norm"))?;
        }
        Ok(EncoderOutput { stages, tokens })
    }

    pub fn encode(&self, x: &Tensor) -> Result<TokenGrid> {
        Ok(self.forward(x)?.tokens)
    }
}

/// Check that `store` holds exactly the encoder parameters of `cfg` under
/// `prefix`, with matching shapes.
pub fn check_encoder_layout(cfg: &EncoderConfig, store: &ParamStore, prefix: &str) -> Result<()> {
    let mut reference = ParamStore::new(store.dtype());
    init_encoder(cfg, &mut reference, prefix, &mut ChaCha8Rng::seed_from_u64(0))?;
    let lead = format!("{prefix}.");
    let mut present = 0;
    for (name, var) in reference.iter() {
        let got = store
            .get(name)
            .map_err(|_| Error::CheckpointMismatch(format!("missing parameter `{name}`")))?;
        if got.dims() != var.dims() {
            return Err(Error::CheckpointMismatch(format!(
                "`{name}` has shape {:?}, config expects {:?}",
                got.dims(),
                var.dims()
            )));
        }
        present += 1;
    }
    let extra = store.names().filter(|n| n.starts_with(&lead)).count();
    if extra != present {
        return Err(Error::CheckpointMismatch(format!(
            "{extra} parameters under `{prefix}`, config defines {present}"
        )));
    }
    Ok(())
}
