//! Independent reference implementations shared by the integration tests.
//! Everything here works on plain `Vec<f64>` with explicit loops.

#![allow(dead_code)]

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use trot::encoder::{EncoderConfig, Variant};

/// Token embeddings indexed `[volume][view][position] -> vector`.
pub type Tokens = Vec<Vec<Vec<Vec<f64>>>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, b: usize, m: usize, p: usize) -> Tokens {
    (0..b)
        .map(|_| {
            (0..2)
                .map(|_| {
                    (0..m)
                        .map(|_| unit((0..p).map(|_| rng.random_range(-1.0..1.0)).collect()))
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn tokens_tensor(z: &Tokens) -> Tensor {
    let (b, m, p) = (z.len(), z[0][0].len(), z[0][0][0].len());
    let flat: Vec<f64> = z.iter().flatten().flatten().flatten().copied().collect();
    Tensor::from_vec(flat, (b, 2, m, p), &Device::Cpu).unwrap()
}

/// Token contrastive loss by direct summation. Same-position tokens of other
/// volumes enter the denominator with weight `w` (`w = 1` is the plain loss).
pub fn brute_contrastive(z: &Tokens, tau: f64, w: f64, symmetrize: bool) -> f64 {
    let b = z.len();
    let m = z[0][0].len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..b {
        for v in 0..2 {
            if v == 1 && !symmetrize {
                continue;
            }
            for pos in 0..m {
                let a = &z[i][v][pos];
                let positive = dot(a, &z[i][1 - v][pos]) / tau;
                let mut denom = 0.0;
                for j in 0..b {
                    for u in 0..2 {
                        for q in 0..m {
                            if (j, u, q) == (i, v, pos) {
                                continue;
                            }
                            let weight = if q == pos && j != i { w } else { 1.0 };
                            denom += weight * (dot(a, &z[j][u][q]) / tau).exp();
                        }
                    }
                }
                total += denom.ln() - positive;
                anchors += 1;
            }
        }
    }
    total / anchors as f64
}

pub fn dice_oracle(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    let p = pred.iter().filter(|&&c| c == class).count();
    let t = truth.iter().filter(|&&c| c == class).count();
    let both = pred.iter().zip(truth).filter(|(&a, &b)| a == class && b == class).count();
    if p + t == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + t) as f64
    }
}

/// Voxels of `mask` with at least one 6-neighbour outside the mask or
/// outside the grid.
pub fn surface(mask: &[bool], shape: [usize; 3]) -> Vec<[i64; 3]> {
    let [d, h, w] = shape.map(|n| n as i64);
    let at = |i: i64, j: i64, k: i64| {
        i >= 0 && j >= 0 && k >= 0 && i < d && j < h && k < w && mask[((i * h + j) * w + k) as usize]
    };
    let mut out = Vec::new();
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                if !at(i, j, k) {
                    continue;
                }
                let steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if steps.iter().any(|&(a, b, c)| !at(i + a, j + b, k + c)) {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// 95th percentile of the pooled nearest-surface distances in both
/// directions, computed from the full distance matrix.
pub fn hd95_oracle(pred: &[bool], truth: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> f64 {
    let a = surface(pred, shape);
    let b = surface(truth, shape);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let dist = |p: &[i64; 3], q: &[i64; 3]| {
        (0..3)
            .map(|x| ((p[x] - q[x]) as f64 * spacing[x]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let matrix: Vec<Vec<f64>> = a.iter().map(|p| b.iter().map(|q| dist(p, q)).collect()).collect();
    let mut pooled: Vec<f64> = matrix
        .iter()
        .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    for col in 0..b.len() {
        pooled.push(matrix.iter().map(|row| row[col]).fold(f64::INFINITY, f64::min));
    }
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (pooled.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    pooled[lo] + (rank - lo as f64) * (pooled[hi] - pooled[lo])
}

/// Smallest encoder that still has two levels and shifted windows.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        variant: Variant::Hierarchical,
        in_channels: 1,
        input_shape: [8, 8, 8],
        patch_size: [2, 2, 2],
        n_stages: 2,
        blocks_per_stage: 2,
        embed_dim: 4,
        window_size: [2, 2, 2],
        n_heads: 2,
        mlp_ratio: 2,
        shifted_windows: true,
    }
}

/// Encoder used by the desk-scale experiments: 16³ input, two levels.
pub fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        input_shape: [16, 16, 16],
        embed_dim: 8,
        n_stages: 2,
        window_size: [4, 4, 4],
        n_heads: 2,
        ..EncoderConfig::hierarchical()
    }
}
