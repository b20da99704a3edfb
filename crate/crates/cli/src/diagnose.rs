//! Collapse diagnostics of a stored encoder: metrics over a handful of
//! volumes and a 2-D principal-component scatter of the token embeddings.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use trot::checkpoint::{load_checkpoint, ENCODER_PREFIX};
use trot::data::{load_dataset, Volume};
use trot::encoder::{check_encoder_layout, volumes_to_tensor, Encoder};
use trot::objectives::{collapse_metrics, CollapseReport};
use trot::plot::{Chart, Series};
use trot::training::record::{prepare_run_dir, Record, RECORD_FILE};
use trot::{Error, Result};

const BATCH: usize = 4;

/// Project unit-normalized rows of `(n, p)` data onto its top two principal
/// axes.
pub fn pca_2d(rows: &[f64], p: usize) -> Vec<(f64, f64)> {
    let n = rows.len() / p;
    let mut x = DMatrix::from_row_slice(n, p, rows);
    for mut r in x.row_iter_mut() {
        let norm = r.norm();
        if norm > 0.0 {
            r /= norm;
        }
    }
    let mean = x.row_mean();
    for mut r in x.row_iter_mut() {
        r -= &mean;
    }
    let cov = x.transpose() * &x / n.max(2).saturating_sub(1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| order.get(k).map(|&i| eig.eigenvectors.column(i).into_owned());
    let (a, b) = (axis(0), axis(1));
    x.row_iter()
        .map(|r| {
            let proj = |v: &Option<nalgebra::DVector<f64>>| v.as_ref().map_or(0.0, |v| r.dot(&v.transpose()));
            (proj(&a), proj(&b))
        })
        .collect()
}

/// Final encoder tokens `(N, M, C)` of `volumes`.
fn encode_all(encoder: &Encoder, volumes: &[Volume], dtype: DType) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in volumes.chunks(BATCH) {
        let refs: Vec<&Volume> = chunk.iter().collect();
        let x = volumes_to_tensor(&refs, dtype)?;
        parts.push(encoder.encode(&x)?.flatten_positions()?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

pub fn diagnose(checkpoint: &Path, volumes: &[Volume]) -> Result<(CollapseReport, Tensor, u64)> {
    let ckpt = load_checkpoint(checkpoint)?;
    check_encoder_layout(&ckpt.meta.encoder, &ckpt.store, ENCODER_PREFIX)?;
    let encoder = Encoder::new(&ckpt.meta.encoder, &ckpt.store, ENCODER_PREFIX);
    let z = encode_all(&encoder, volumes, ckpt.store.dtype())?;
    Ok((collapse_metrics(&z, None)?, z, ckpt.meta.step))
}

pub fn run(checkpoint: &Path, dataset: &Path, n_volumes: usize, out: &Path, force: bool) -> Result<()> {
    if n_volumes < 2 {
        return Err(Error::Config(format!(
            "--n-volumes must be at least 2 to compare volumes, got {n_volumes}"
        )));
    }
    let ds = load_dataset(dataset)?;
    if ds.volumes.len() < n_volumes {
        return Err(Error::Config(format!(
            "{} holds {} volumes, fewer than --n-volumes {n_volumes}",
            dataset.display(),
            ds.volumes.len()
        )));
    }
    let volumes = &ds.volumes[..n_volumes];
    let (report, z, step) = diagnose(checkpoint, volumes)?;
    prepare_run_dir(out, force)?;

    let path = out.join(RECORD_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    for (metric, value) in report.entries() {
        let rec = Record::Collapse {
            step: step as usize,
            metric: metric.into(),
            value,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::Io { path: path.clone(), source: e })?;
        println!("{metric} {value:.6}");
    }

    let (n, m, p) = z.dims3()?;
    let rows = z.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let coords = pca_2d(&rows, p);
    let series = (0..m)
        .map(|pos| Series {
            name: format!("position {pos}"),
            points: (0..n).map(|i| coords[i * m + pos]).collect(),
        })
        .collect();
    let chart = Chart {
        title: format!("Token embeddings of {n} volumes, colored by position"),
        x_label: "PC 1".into(),
        y_label: "PC 2".into(),
        series,
        scatter: true,
    };
    let svg = out.join("tokens_pca.svg");
    fs::write(&svg, chart.render()).map_err(|e| Error::Io { path: svg.clone(), source: e })?;
    println!("{}", svg.display());
    Ok(())
}
