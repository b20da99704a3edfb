//! Synthetic "organ blob" segmentation volumes and their on-disk store.
//!
//! Each volume is a background of constant intensity with, per foreground
//! class, a random number of axis-aligned ellipsoids of a class-specific
//! intensity, plus voxelwise Gaussian noise. Everything is a deterministic
//! function of the dataset seed.
//!
//! Generation draws from one `ChaCha8Rng` stream seeded with `spec.seed`.
//! Per volume, in order:
//!
//! 1. for each class `k = 1..=K`: a blob count in `blobs_per_class`
//!    (inclusive), then per blob: centre (3 draws in `[0, n_a)`), radii
//!    (3 draws in `radius_fraction · n_a`, clamped to at least one voxel),
//!    intensity (one draw per channel in the class range);
//! 2. one standard normal per voxel per channel, scaled by `noise_std`.
//!
//! A voxel with index `v` is inside an ellipsoid when
//! `Σ_a ((v_a + 0.5 − c_a) / r_a)² ≤ 1`. Blobs are painted in draw order, so
//! later classes overwrite earlier ones.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TROTVOL\0";
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;
const LABEL_U8: u8 = 0;
const HEADER_LEN: usize = 56;

/// A multi-channel voxel volume with its dense label mask.
///
/// `intensities` is channel-major `channels × D × H × W`; `label` is
/// `D × H × W` with 0 for background and `1..=K` for foreground classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub intensities: Vec<f64>,
    pub label: Vec<u8>,
    pub channels: usize,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub id: String,
}

impl Volume {
    pub fn zeros(channels: usize, shape: [usize; 3]) -> Self {
        let n = shape.iter().product::<usize>();
        Self {
            intensities: vec![0.0; channels * n],
            label: vec![0; n],
            channels,
            shape,
            spacing: [1.0; 3],
            id: String::new(),
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    /// Binary mask of one label class.
    pub fn class_mask(&self, class: u8) -> Vec<bool> {
        self.label.iter().map(|&l| l == class).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_volumes: usize,
    pub shape: [usize; 3],
    pub channels: usize,
    pub n_classes: usize,
    /// Inclusive range of blob counts per class.
    pub blobs_per_class: [usize; 2],
    /// Ellipsoid radii as a fraction of the axis extent.
    pub radius_fraction: [f64; 2],
    /// Intensity range per foreground class; empty means evenly spread defaults.
    pub class_intensity: Vec<[f64; 2]>,
    pub background: f64,
    pub noise_std: f64,
    pub spacing: [f64; 3],
    /// Every axis must be a multiple of this (the encoder's total downsampling).
    pub divisor: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_volumes: 20,
            shape: [32, 32, 32],
            channels: 1,
            n_classes: 3,
            blobs_per_class: [1, 2],
            radius_fraction: [0.12, 0.25],
            class_intensity: Vec::new(),
            background: 0.1,
            noise_std: 0.05,
            spacing: [1.0; 3],
            divisor: 8,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.n_volumes == 0 {
            return bad("n_volumes must be at least 1".into());
        }
        if self.n_classes == 0 {
            return bad("n_classes must be at least 1".into());
        }
        if self.n_classes > u8::MAX as usize {
            return bad(format!("n_classes {} does not fit a u8 label", self.n_classes));
        }
        if self.channels == 0 {
            return bad("channels must be at least 1".into());
        }
        if self.divisor == 0 {
            return bad("divisor must be positive".into());
        }
        for &n in &self.shape {
            if n < 8 || n % self.divisor != 0 {
                return bad(format!(
                    "shape {:?} must be >= 8 and divisible by {} on every axis",
                    self.shape, self.divisor
                ));
            }
        }
        if self.blobs_per_class[0] > self.blobs_per_class[1] {
            return bad(format!("blobs_per_class {:?} is not ordered", self.blobs_per_class));
        }
        let [rlo, rhi] = self.radius_fraction;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad(format!("radius_fraction {:?} is not an ordered positive range", self.radius_fraction));
        }
        if !self.class_intensity.is_empty() && self.class_intensity.len() != self.n_classes {
            return bad(format!(
                "{} intensity ranges for {} classes",
                self.class_intensity.len(),
                self.n_classes
            ));
        }
        for r in &self.class_intensity {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
                return bad(format!("intensity range {r:?} must be ordered within [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.background) || self.noise_std < 0.0 {
            return bad("background must lie in [0, 1] and noise_std must be non-negative".into());
        }
        Ok(())
    }

    /// Intensity range of class `k` (1-based).
    pub fn intensity_range(&self, k: usize) -> [f64; 2] {
        if let Some(r) = self.class_intensity.get(k - 1) {
            return *r;
        }
        let centre = 0.3 + 0.6 * k as f64 / self.n_classes as f64;
        [centre - 0.05, (centre + 0.05).min(1.0)]
    }
}

/// One ellipsoid as drawn by the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub class: u8,
    pub centre: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: Vec<f64>,
}

impl Blob {
    pub fn contains(&self, [i, j, k]: [usize; 3]) -> bool {
        let v = [i as f64, j as f64, k as f64];
        (0..3)
            .map(|a| ((v[a] + 0.5 - self.centre[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn draw_blobs(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let mut blobs = Vec::new();
    for k in 1..=spec.n_classes {
        let count = rng.random_range(spec.blobs_per_class[0]..=spec.blobs_per_class[1]);
        let [ilo, ihi] = spec.intensity_range(k);
        for _ in 0..count {
            let centre = spec.shape.map(|n| rng.random_range(0.0..n as f64));
            let radii = spec.shape.map(|n| {
                let n = n as f64;
                let r = rng.random_range(spec.radius_fraction[0] * n..=spec.radius_fraction[1] * n);
                r.max(1.0)
            });
            let intensity = (0..spec.channels)
                .map(|_| rng.random_range(ilo..=ihi))
                .collect();
            blobs.push(Blob {
                class: k as u8,
                centre,
                radii,
                intensity,
            });
        }
    }
    blobs
}

fn rasterize(spec: &DatasetSpec, blobs: &[Blob], id: String, rng: &mut ChaCha8Rng) -> Volume {
    let mut v = Volume::zeros(spec.channels, spec.shape);
    v.spacing = spec.spacing;
    v.id = id;
    let n = v.n_voxels();
    v.intensities.fill(spec.background);
    let [d, h, w] = spec.shape;
    for blob in blobs {
        for i in 0..d {
            for j in 0..h {
                for k in 0..w {
                    if blob.contains([i, j, k]) {
                        let idx = (i * h + j) * w + k;
                        v.label[idx] = blob.class;
                        for (c, &value) in blob.intensity.iter().enumerate() {
                            v.intensities[c * n + idx] = value;
                        }
                    }
                }
            }
        }
    }
    for x in v.intensities.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x = (*x + spec.noise_std * z).clamp(0.0, 1.0);
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub volumes: Vec<Volume>,
}

pub fn volume_id(index: usize) -> String {
    format!("{index:04}")
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let volumes = (0..spec.n_volumes)
        .map(|i| {
            let blobs = draw_blobs(spec, &mut rng);
            rasterize(spec, &blobs, volume_id(i), &mut rng)
        })
        .collect();
    Ok(Dataset {
        n_classes: spec.n_classes,
        volumes,
    })
}

fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + v.intensities.len() * 8 + v.label.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    buf.push(DTYPE_F64);
    buf.push(LABEL_U8);
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(v.channels as u32).to_le_bytes());
    for &n in &v.shape {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &s in &v.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    debug_assert_eq!(buf.len(), HEADER_LEN);
    for &x in &v.intensities {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&v.label);
    buf
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::format(
                self.path,
                field,
                format!("file truncated: need {} bytes, have {}", self.pos + n, self.bytes.len()),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

fn decode_volume(path: &Path, bytes: &[u8], id: &str, n_classes: usize) -> Result<Volume> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(path, "magic", "not a volume file"));
    }
    let version = r.u32("schema_version")?;
    if version != SCHEMA_VERSION {
        return Err(Error::format(
            path,
            "schema_version",
            format!("unsupported schema version {version}"),
        ));
    }
    let dtype = r.take(1, "dtype")?[0];
    let label_dtype = r.take(1, "label_dtype")?[0];
    if label_dtype != LABEL_U8 {
        return Err(Error::format(path, "label_dtype", format!("unknown code {label_dtype}")));
    }
    r.take(2, "reserved")?;
    let channels = r.u32("channels")? as usize;
    let mut shape = [0usize; 3];
    for (a, n) in shape.iter_mut().enumerate() {
        *n = r.u32(&format!("shape[{a}]"))? as usize;
    }
    let mut spacing = [0.0; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        *s = r.f64(&format!("spacing[{a}]"))?;
    }
    let n = shape.iter().product::<usize>();
    let intensities: Vec<f64> = match dtype {
        DTYPE_F64 => r
            .take(channels * n * 8, "intensities")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DTYPE_F32 => r
            .take(channels * n * 4, "intensities")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        other => return Err(Error::format(path, "dtype", format!("unknown code {other}"))),
    };
    if intensities.iter().any(|x| !x.is_finite()) {
        return Err(Error::format(path, "intensities", "non-finite value"));
    }
    let label = r.take(n, "labels")?.to_vec();
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            "labels",
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    if let Some(&l) = label.iter().find(|&&l| l as usize > n_classes) {
        return Err(Error::format(
            path,
            "labels",
            format!("label {l} exceeds n_classes {n_classes}"),
        ));
    }
    Ok(Volume {
        intensities,
        label,
        channels,
        shape,
        spacing,
        id: id.to_string(),
    })
}

/// Write `index.txt` plus one `vol_<id>.bin` per volume into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    index.push_str("# trot synthetic segmentation dataset\n");
    index.push_str(&format!("schema_version = {SCHEMA_VERSION}\n"));
    index.push_str(&format!("n_classes = {}\n", ds.n_classes));
    index.push_str(&format!("n_volumes = {}\n", ds.volumes.len()));
    for v in &ds.volumes {
        if v.id.is_empty() || v.id.chars().any(|c| c.is_whitespace() || c == '/') {
            return Err(Error::InvalidSpec(format!("volume id {:?} is not a valid file stem", v.id)));
        }
        index.push_str(&format!("volume = {}\n", v.id));
        let path = dir.join(format!("vol_{}.bin", v.id));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&encode_volume(v)).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("index.txt");
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.txt");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut version = None;
    let mut n_classes = None;
    let mut n_volumes = None;
    let mut ids = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::format(&index_path, line, "expected `key = value`"))?;
        let parse = |field: &str| {
            value
                .parse::<usize>()
                .map_err(|_| Error::format(&index_path, field, format!("not an integer: {value}")))
        };
        match key {
            "schema_version" => version = Some(parse(key)?),
            "n_classes" => n_classes = Some(parse(key)?),
            "n_volumes" => n_volumes = Some(parse(key)?),
            "volume" => ids.push(value.to_string()),
            other => return Err(Error::format(&index_path, other, "unknown key")),
        }
    }
    match version {
        Some(v) if v == SCHEMA_VERSION as usize => {}
        Some(v) => {
            return Err(Error::format(
                &index_path,
                "schema_version",
                format!("unsupported schema version {v}"),
            ))
        }
        None => return Err(Error::format(&index_path, "schema_version", "missing")),
    }
    let n_classes = n_classes.ok_or_else(|| Error::format(&index_path, "n_classes", "missing"))?;
    let n_volumes = n_volumes.ok_or_else(|| Error::format(&index_path, "n_volumes", "missing"))?;
    if n_volumes != ids.len() {
        return Err(Error::format(
            &index_path,
            "n_volumes",
            format!("declares {n_volumes} volumes, lists {}", ids.len()),
        ));
    }
    let volumes = ids
        .iter()
        .map(|id| {
            let path = dir.join(format!("vol_{id}.bin"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            decode_volume(&path, &bytes, id, n_classes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { n_classes, volumes })
}

/// Seeded disjoint train/validation/test partition.
pub fn split_dataset(
    volumes: &[Volume],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<Volume>, Vec<Volume>, Vec<Volume>)> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidFractions(fractions));
    }
    let n = volumes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| volumes[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

/// `ceil(fraction · |train|)` volumes. The draw is a prefix of one seeded
/// permutation, so subsets for growing fractions are nested.
pub fn subsample_labeled(train: &[Volume], fraction: f64, seed: u64) -> Result<Vec<Volume>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    let n = train.len();
    let k = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..k.min(n)].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| train[i].clone()).collect())
}
