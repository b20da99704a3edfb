//! Grid symmetries of a 3D voxel lattice.
//!
//! Every element of the 48-element hyperoctahedral group is written as an
//! axis permutation followed by per-axis reflections. Applying a transform is
//! pure reindexing, so round trips are bit-exact and no interpolation is ever
//! involved. The same transform acts on voxel volumes, label masks and token
//! grids, which is what lets a rotated view be encoded and its token grid be
//! put back into the frame of the untouched view.

use std::fmt;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// A bijection of a 3D grid built from an axis permutation and reflections.
///
/// Output axis `k` is read from input axis `axis_perm[k]`, and is then
/// reversed when `flips[k]` is set. For an output coordinate `c` on a grid
/// with extents `n`, the source voxel `s` satisfies
/// `s[axis_perm[k]] = if flips[k] { n[k] - 1 - c[k] } else { c[k] }`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub axis_perm: [usize; 3],
    pub flips: [bool; 3],
}

impl Default for SpatialTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl fmt::Display for SpatialTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d, e, g] = self.to_ints();
        write!(f, "{a} {b} {c} {d} {e} {g}")
    }
}

impl SpatialTransform {
    pub const IDENTITY: Self = Self {
        axis_perm: [0, 1, 2],
        flips: [false; 3],
    };

    pub fn new(axis_perm: [usize; 3], flips: [bool; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for &a in &axis_perm {
            if a > 2 || seen[a] {
                return Err(Error::InvalidSpec(format!(
                    "{axis_perm:?} is not a permutation of (0, 1, 2)"
                )));
            }
            seen[a] = true;
        }
        Ok(Self { axis_perm, flips })
    }

    /// Reflection of a single axis.
    pub fn flip(axis: usize) -> Self {
        let mut flips = [false; 3];
        flips[axis] = true;
        Self {
            axis_perm: [0, 1, 2],
            flips,
        }
    }

    /// Exchange of two axes.
    pub fn swap(a: usize, b: usize) -> Self {
        let mut axis_perm = [0, 1, 2];
        axis_perm.swap(a, b);
        Self {
            axis_perm,
            flips: [false; 3],
        }
    }

    /// All 48 elements, permutations in lexicographic order, then flips as
    /// a 3-bit counter with axis 0 most significant.
    pub fn all() -> Vec<Self> {
        PERMUTATIONS
            .iter()
            .flat_map(|&axis_perm| {
                (0..8u8).map(move |bits| Self {
                    axis_perm,
                    flips: [bits & 4 != 0, bits & 2 != 0, bits & 1 != 0],
                })
            })
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// `apply(x, a.compose(b)) == apply(apply(x, b), a)`.
    pub fn compose(&self, inner: &Self) -> Self {
        let mut axis_perm = [0; 3];
        let mut flips = [false; 3];
        for k in 0..3 {
            let j = self.axis_perm[k];
            axis_perm[k] = inner.axis_perm[j];
            flips[k] = self.flips[k] ^ inner.flips[j];
        }
        Self { axis_perm, flips }
    }

    pub fn inverse(&self) -> Self {
        let mut axis_perm = [0; 3];
        for (k, &p) in self.axis_perm.iter().enumerate() {
            axis_perm[p] = k;
        }
        let flips = [
            self.flips[axis_perm[0]],
            self.flips[axis_perm[1]],
            self.flips[axis_perm[2]],
        ];
        Self { axis_perm, flips }
    }

    /// Shape of the output grid for an input of `shape`.
    pub fn permuted_shape(&self, shape: [usize; 3]) -> [usize; 3] {
        [
            shape[self.axis_perm[0]],
            shape[self.axis_perm[1]],
            shape[self.axis_perm[2]],
        ]
    }

    fn permuted_spacing(&self, s: [f64; 3]) -> [f64; 3] {
        [s[self.axis_perm[0]], s[self.axis_perm[1]], s[self.axis_perm[2]]]
    }

    pub fn preserves_shape(&self, shape: [usize; 3]) -> bool {
        self.permuted_shape(shape) == shape
    }

    fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        if self.preserves_shape(shape) {
            Ok(())
        } else {
            Err(Error::ShapeNotInvariant {
                shape,
                perm: self.axis_perm,
            })
        }
    }

    /// Source coordinate read by output coordinate `out` on a grid of `shape`.
    pub fn source_coord(&self, out: [usize; 3], shape: [usize; 3]) -> [usize; 3] {
        let out_shape = self.permuted_shape(shape);
        let mut src = [0; 3];
        for k in 0..3 {
            src[self.axis_perm[k]] = if self.flips[k] {
                out_shape[k] - 1 - out[k]
            } else {
                out[k]
            };
        }
        src
    }

    /// Permutation as three integers followed by flips as three 0/1 values.
    pub fn to_ints(&self) -> [u8; 6] {
        let p = self.axis_perm;
        let f = self.flips;
        [
            p[0] as u8, p[1] as u8, p[2] as u8, f[0] as u8, f[1] as u8, f[2] as u8,
        ]
    }

    pub fn from_ints(ints: [u8; 6]) -> Result<Self> {
        let mut flips = [false; 3];
        for (k, &b) in ints[3..].iter().enumerate() {
            flips[k] = match b {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::InvalidSpec(format!(
                        "flip entry must be 0 or 1, got {other}"
                    )))
                }
            };
        }
        Self::new(
            [ints[0] as usize, ints[1] as usize, ints[2] as usize],
            flips,
        )
    }
}

/// Reindex a channel-major `channels × D × H × W` array.
pub fn apply_to_grid<T: Copy>(
    data: &[T],
    channels: usize,
    shape: [usize; 3],
    t: &SpatialTransform,
) -> Result<Vec<T>> {
    t.check_shape(shape)?;
    let [d, h, w] = shape;
    let plane = d * h * w;
    if data.len() != channels * plane {
        return Err(Error::ShapeMismatch(format!(
            "array of length {} does not hold {channels} x {shape:?}",
            data.len()
        )));
    }
    if t.is_identity() {
        return Ok(data.to_vec());
    }
    let mut out = Vec::with_capacity(data.len());
    for c in 0..channels {
        let base = c * plane;
        for i in 0..d {
            for j in 0..h {
                for k in 0..w {
                    let [si, sj, sk] = t.source_coord([i, j, k], shape);
                    out.push(data[base + (si * h + sj) * w + sk]);
                }
            }
        }
    }
    Ok(out)
}

/// Transform intensities and label mask of a volume together.
pub fn apply_to_volume(v: &Volume, t: &SpatialTransform) -> Result<Volume> {
    let intensities = apply_to_grid(&v.intensities, v.channels, v.shape, t)?;
    let label = apply_to_grid(&v.label, 1, v.shape, t)?;
    Ok(Volume {
        intensities,
        label,
        channels: v.channels,
        shape: v.shape,
        spacing: t.permuted_spacing(v.spacing),
        id: v.id.clone(),
    })
}

/// Differentiable version of [`apply_to_grid`] for a tensor whose axes
/// `first_axis..first_axis + 3` are the spatial ones.
pub fn apply_to_tensor(x: &Tensor, first_axis: usize, t: &SpatialTransform) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < first_axis + 3 {
        return Err(Error::ShapeMismatch(format!(
            "tensor of rank {} has no spatial axes at {first_axis}",
            dims.len()
        )));
    }
    t.check_shape([dims[first_axis], dims[first_axis + 1], dims[first_axis + 2]])?;
    if t.is_identity() {
        return Ok(x.clone());
    }
    let mut order: Vec<usize> = (0..dims.len()).collect();
    for k in 0..3 {
        order[first_axis + k] = first_axis + t.axis_perm[k];
    }
    let mut y = x.permute(order)?;
    let flipped: Vec<usize> = (0..3)
        .filter(|&k| t.flips[k])
        .map(|k| first_axis + k)
        .collect();
    if !flipped.is_empty() {
        y = y.contiguous()?.flip(&flipped)?;
    }
    Ok(y)
}

/// Put a token grid computed from a transformed view back into the frame of
/// the untransformed input: the grid is reindexed by `t⁻¹`.
pub fn restore_token_grid(g: &TokenGrid, t: &SpatialTransform) -> Result<TokenGrid> {
    Ok(TokenGrid {
        features: apply_to_tensor(&g.features, 1, &t.inverse())?,
        stage: g.stage,
    })
}

/// Restore a batched token grid where every sample carries its own transform.
pub fn restore_token_batch(g: &TokenGrid, transforms: &[SpatialTransform]) -> Result<TokenGrid> {
    let batch = g.features.dim(0)?;
    if batch != transforms.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} transforms for a batch of {batch}",
            transforms.len()
        )));
    }
    if transforms.iter().all(SpatialTransform::is_identity) {
        return Ok(g.clone());
    }
    let parts = transforms
        .iter()
        .enumerate()
        .map(|(i, t)| apply_to_tensor(&g.features.narrow(0, i, 1)?, 1, &t.inverse()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenGrid {
        features: Tensor::cat(&parts, 0)?,
        stage: g.stage,
    })
}

/// Elements whose permutation preserves `grid_shape` and every patch extent.
pub fn valid_transforms(grid_shape: [usize; 3], patch_sizes: &[[usize; 3]]) -> Vec<SpatialTransform> {
    SpatialTransform::all()
        .into_iter()
        .filter(|t| {
            t.preserves_shape(grid_shape) && patch_sizes.iter().all(|&p| t.preserves_shape(p))
        })
        .collect()
}

/// Uniform draw from [`valid_transforms`]. The eight pure reflections are
/// always valid, so the candidate set is never empty.
pub fn sample_valid_transform<R: Rng + ?Sized>(
    grid_shape: [usize; 3],
    patch_sizes: &[[usize; 3]],
    rng: &mut R,
) -> SpatialTransform {
    let candidates = valid_transforms(grid_shape, patch_sizes);
    candidates[rng.random_range(0..candidates.len())]
}
