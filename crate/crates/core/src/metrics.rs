//! Segmentation scores: per-class Dice and 95th-percentile Hausdorff distance.
//!
//! Conventions: a class absent from both masks scores Dice 1 and HD95 0; a
//! class present in only one of them scores Dice 0 and HD95 = +∞.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("masks of {a} and {b} voxels")));
    }
    Ok(())
}

/// `2|P ∩ T| / (|P| + |T|)` for label `class`.
pub fn dice(pred: &[u8], truth: &[u8], class: u8) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    let (mut p, mut t, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(truth) {
        let (ia, ib) = (a == class, b == class);
        p += ia as u64;
        t += ib as u64;
        both += (ia && ib) as u64;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok((2 * both) as f64 / (p + t) as f64)
}

/// Foreground voxels with at least one background face neighbour; voxels
/// outside the grid count as background.
pub fn boundary_voxels(mask: &[bool], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = shape;
    let at = |i: isize, j: isize, k: isize| -> bool {
        if i < 0 || j < 0 || k < 0 || i >= d as isize || j >= h as isize || k >= w as isize {
            return false;
        }
        mask[(i as usize * h + j as usize) * w + k as usize]
    };
    let mut out = Vec::new();
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                if !mask[(i * h + j) * w + k] {
                    continue;
                }
                let (ii, jj, kk) = (i as isize, j as isize, k as isize);
                let interior = at(ii - 1, jj, kk)
                    && at(ii + 1, jj, kk)
                    && at(ii, jj - 1, kk)
                    && at(ii, jj + 1, kk)
                    && at(ii, jj, kk - 1)
                    && at(ii, jj, kk + 1);
                if !interior {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

fn nearest(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    (0..3)
                        .map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// 95th percentile of the pooled surface distances, both directions.
pub fn hd95(pred: &[bool], truth: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    check_len(pred.len(), shape.iter().product())?;
    let bp = boundary_voxels(pred, shape);
    let bt = boundary_voxels(truth, shape);
    match (bp.is_empty(), bt.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(f64::INFINITY),
        _ => {}
    }
    let mut distances = nearest(&bp, &bt, spacing);
    distances.extend(nearest(&bt, &bp, spacing));
    Ok(percentile(&mut distances, 95.0))
}

/// Writes infinite values as the string `"inf"`.
pub mod serde_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad distance `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u8,
    pub dice: f64,
    #[serde(with = "serde_inf")]
    pub hd95: f64,
    pub pred_present: bool,
    pub truth_present: bool,
}

/// Dice and HD95 for every foreground class `1..=n_classes`.
pub fn evaluate_segmentation(
    pred: &[u8],
    truth: &[u8],
    shape: [usize; 3],
    spacing: [f64; 3],
    n_classes: usize,
) -> Result<Vec<ClassScore>> {
    check_len(pred.len(), truth.len())?;
    (1..=n_classes as u8)
        .map(|class| {
            let p: Vec<bool> = pred.iter().map(|&l| l == class).collect();
            let t: Vec<bool> = truth.iter().map(|&l| l == class).collect();
            Ok(ClassScore {
                class,
                dice: dice(pred, truth, class)?,
                hd95: hd95(&p, &t, shape, spacing)?,
                pred_present: p.contains(&true),
                truth_present: t.contains(&true),
            })
        })
        .collect()
}
