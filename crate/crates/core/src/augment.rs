//! Two-view construction: texture transforms on both views, block masking on
//! one view and a random grid symmetry on the other.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::spatial::{apply_to_volume, sample_valid_transform, SpatialTransform};

/// Hard ceiling on the masked share of a view.
pub const MAX_MASK_RATIO: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub noise_std: [f64; 2],
    /// Fraction of the frequency band kept per axis by the Gibbs transform.
    pub gibbs_cutoff: [f64; 2],
    pub scale: [f64; 2],
    pub shift: [f64; 2],
    pub p_noise: f64,
    pub p_gibbs: f64,
    pub p_scale: f64,
    pub p_shift: f64,
    pub mask: bool,
    pub mask_ratio: f64,
    /// Voxels per mask unit; unset means the coarsest token patch.
    pub mask_block: Option<[usize; 3]>,
    /// Rotate-and-restore on/off.
    pub spatial: bool,
    /// Put the mask on the rotated view instead of the other one.
    pub mask_on_rotated_view: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            noise_std: [0.0, 0.1],
            gibbs_cutoff: [0.5, 1.0],
            scale: [0.9, 1.1],
            shift: [-0.1, 0.1],
            p_noise: 0.5,
            p_gibbs: 0.5,
            p_scale: 0.5,
            p_shift: 0.5,
            mask: true,
            mask_ratio: 0.75,
            mask_block: None,
            spatial: true,
            mask_on_rotated_view: false,
        }
    }
}

impl AugmentationConfig {
    /// Everything off: both views equal the input.
    pub fn disabled() -> Self {
        Self {
            p_noise: 0.0,
            p_gibbs: 0.0,
            p_scale: 0.0,
            p_shift: 0.0,
            mask: false,
            spatial: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio >= 0.0) {
            return Err(Error::InvalidAugmentation(format!(
                "mask_ratio {} must be non-negative",
                self.mask_ratio
            )));
        }
        if self.mask_ratio > MAX_MASK_RATIO {
            return Err(Error::MaskRatioTooHigh(self.mask_ratio));
        }
        let ranges = [
            ("noise_std", self.noise_std),
            ("gibbs_cutoff", self.gibbs_cutoff),
            ("scale", self.scale),
            ("shift", self.shift),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidAugmentation(format!("{name} range [{lo}, {hi}] is not ordered")));
            }
        }
        if self.noise_std[0] < 0.0 {
            return Err(Error::InvalidAugmentation("noise_std must be non-negative".into()));
        }
        if !(self.gibbs_cutoff[0] > 0.0 && self.gibbs_cutoff[1] <= 1.0) {
            return Err(Error::InvalidAugmentation("gibbs_cutoff must lie in (0, 1]".into()));
        }
        for (name, p) in [
            ("p_noise", self.p_noise),
            ("p_gibbs", self.p_gibbs),
            ("p_scale", self.p_scale),
            ("p_shift", self.p_shift),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidAugmentation(format!("{name} = {p} is not a probability")));
            }
        }
        if let Some(b) = self.mask_block {
            if b.contains(&0) {
                return Err(Error::InvalidAugmentation(format!("mask_block {b:?} has a zero extent")));
            }
        }
        Ok(())
    }
}

/// Which mask units were blanked, over a grid of `units` cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMap {
    pub units: [usize; 3],
    pub block: [usize; 3],
    pub masked: Vec<bool>,
}

impl MaskMap {
    pub fn empty(units: [usize; 3], block: [usize; 3]) -> Self {
        Self {
            units,
            block,
            masked: vec![false; units.iter().product()],
        }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug)]
pub struct ViewPair {
    pub view_rotated: Volume,
    pub view_masked: Volume,
    pub transform: SpatialTransform,
    pub mask_map: MaskMap,
}

fn fft_axis(
    data: &mut [Complex<f64>],
    shape: [usize; 3],
    axis: usize,
    planner: &mut FftPlanner<f64>,
    inverse: bool,
) {
    let n = shape[axis];
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let stride = match axis {
        0 => shape[1] * shape[2],
        1 => shape[2],
        _ => 1,
    };
    let mut lane = vec![Complex::new(0.0, 0.0); n];
    let total: usize = shape.iter().product();
    for start in 0..total {
        // Lane starts are the positions whose coordinate along `axis` is 0.
        if (start / stride) % n != 0 {
            continue;
        }
        for (t, x) in lane.iter_mut().enumerate() {
            *x = data[start + t * stride];
        }
        fft.process(&mut lane);
        for (t, x) in lane.iter().enumerate() {
            data[start + t * stride] = *x;
        }
    }
}

/// Sharp low-pass: zero every coefficient whose frequency along some axis
/// exceeds `cutoff · n / 2`, then take the real part of the inverse transform.
pub fn gibbs_truncate(plane: &mut [f64], shape: [usize; 3], cutoff: f64) {
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&x| Complex::new(x, 0.0)).collect();
    for axis in 0..3 {
        fft_axis(&mut buf, shape, axis, &mut planner, false);
    }
    let keep = |f: usize, n: usize| (f.min(n - f) as f64) <= cutoff * n as f64 / 2.0;
    let [d, h, w] = shape;
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                if !(keep(i, d) && keep(j, h) && keep(k, w)) {
                    buf[(i * h + j) * w + k] = Complex::new(0.0, 0.0);
                }
            }
        }
    }
    for axis in 0..3 {
        fft_axis(&mut buf, shape, axis, &mut planner, true);
    }
    let norm = (d * h * w) as f64;
    for (x, c) in plane.iter_mut().zip(&buf) {
        *x = c.re / norm;
    }
}

/// Random combination of Gaussian noise, Gibbs ringing, intensity scaling and
/// intensity shift, each applied with its own probability. The result is
/// clipped to `[0, 1]`; labels are untouched.
pub fn texture_augment<R: Rng + ?Sized>(v: &Volume, cfg: &AugmentationConfig, rng: &mut R) -> Volume {
    let mut out = v.clone();
    let n = v.n_voxels();
    if rng.random_bool(cfg.p_noise) {
        let std = rng.random_range(cfg.noise_std[0]..=cfg.noise_std[1]);
        for x in out.intensities.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x += std * z;
        }
    }
    if rng.random_bool(cfg.p_gibbs) {
        let cutoff = rng.random_range(cfg.gibbs_cutoff[0]..=cfg.gibbs_cutoff[1]);
        for plane in out.intensities.chunks_mut(n) {
            gibbs_truncate(plane, v.shape, cutoff);
        }
    }
    if rng.random_bool(cfg.p_scale) {
        let s = rng.random_range(cfg.scale[0]..=cfg.scale[1]);
        out.intensities.iter_mut().for_each(|x| *x *= s);
    }
    if rng.random_bool(cfg.p_shift) {
        let b = rng.random_range(cfg.shift[0]..=cfg.shift[1]);
        out.intensities.iter_mut().for_each(|x| *x += b);
    }
    out.intensities.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    out
}

/// Blank exactly `round(mask_ratio · units)` randomly chosen mask units.
pub fn block_mask<R: Rng + ?Sized>(
    v: &Volume,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Volume, MaskMap)> {
    if cfg.mask_ratio > MAX_MASK_RATIO {
        return Err(Error::MaskRatioTooHigh(cfg.mask_ratio));
    }
    if !(cfg.mask_ratio >= 0.0) {
        return Err(Error::InvalidAugmentation(format!("mask_ratio {}", cfg.mask_ratio)));
    }
    let block = cfg
        .mask_block
        .ok_or_else(|| Error::InvalidAugmentation("mask_block is not set".into()))?;
    if (0..3).any(|a| block[a] == 0 || v.shape[a] % block[a] != 0) {
        return Err(Error::InvalidAugmentation(format!(
            "mask_block {block:?} does not divide volume shape {:?}",
            v.shape
        )));
    }
    let units = [v.shape[0] / block[0], v.shape[1] / block[1], v.shape[2] / block[2]];
    let total: usize = units.iter().product();
    let count = (cfg.mask_ratio * total as f64).round() as usize;
    let mut map = MaskMap::empty(units, block);
    for u in rand::seq::index::sample(rng, total, count) {
        map.masked[u] = true;
    }
    let mut out = v.clone();
    let n = v.n_voxels();
    let [_, h, w] = v.shape;
    for (u, _) in map.masked.iter().enumerate().filter(|(_, &m)| m) {
        let ui = u / (units[1] * units[2]);
        let uj = (u / units[2]) % units[1];
        let uk = u % units[2];
        for i in ui * block[0]..(ui + 1) * block[0] {
            for j in uj * block[1]..(uj + 1) * block[1] {
                let row = (i * h + j) * w;
                for c in 0..v.channels {
                    let start = c * n + row + uk * block[2];
                    out.intensities[start..start + block[2]].fill(0.0);
                }
            }
        }
    }
    Ok((out, map))
}

/// Build the two views of one volume. `patch_sizes` lists the receptive
/// patch of every token level, finest first; the coarsest one is the default
/// mask unit and all of them constrain which symmetries may be drawn.
pub fn make_view_pair<R: Rng + ?Sized>(
    v: &Volume,
    cfg: &AugmentationConfig,
    patch_sizes: &[[usize; 3]],
    rng: &mut R,
) -> Result<ViewPair> {
    cfg.validate()?;
    let block = cfg
        .mask_block
        .or_else(|| patch_sizes.last().copied())
        .unwrap_or([1, 1, 1]);
    let first = texture_augment(v, cfg, rng);
    let second = texture_augment(v, cfg, rng);
    let transform = if cfg.spatial {
        sample_valid_transform(v.shape, patch_sizes, rng)
    } else {
        SpatialTransform::IDENTITY
    };
    let mask = |x: &Volume, rng: &mut R| -> Result<(Volume, MaskMap)> {
        if cfg.mask {
            let cfg = AugmentationConfig {
                mask_block: Some(block),
                ..cfg.clone()
            };
            block_mask(x, &cfg, rng)
        } else {
            let units = [v.shape[0] / block[0], v.shape[1] / block[1], v.shape[2] / block[2]];
            Ok((x.clone(), MaskMap::empty(units, block)))
        }
    };
    let (view_rotated, view_masked, mask_map) = if cfg.mask_on_rotated_view {
        let (masked_first, map) = mask(&first, rng)?;
        (apply_to_volume(&masked_first, &transform)?, second, map)
    } else {
        let (masked_second, map) = mask(&second, rng)?;
        (apply_to_volume(&first, &transform)?, masked_second, map)
    };
    Ok(ViewPair {
        view_rotated,
        view_masked,
        transform,
        mask_map,
    })
}
