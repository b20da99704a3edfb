use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objectives::Framework;
use crate::training::config::RunConfig;
use crate::training::finetune::finetune_on;
use crate::training::pretrain::pretrain_on;
use crate::training::record::{prepare_run_dir, RunOutcome};

/// Values to sweep per ablation axis; an empty list leaves the axis at the
/// base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationAxes {
    pub framework: Vec<Framework>,
    pub mask: Vec<bool>,
    pub spatial: Vec<bool>,
    pub mask_ratio: Vec<f64>,
    pub w: Vec<f64>,
}

impl AblationAxes {
    pub fn is_empty(&self) -> bool {
        self.framework.is_empty()
            && self.mask.is_empty()
            && self.spatial.is_empty()
            && self.mask_ratio.is_empty()
            && self.w.is_empty()
    }

    /// Parse one `axis=v1,v2,...` command-line specification into `self`.
    pub fn add_spec(&mut self, spec: &str) -> Result<()> {
        let (axis, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("axis `{spec}` must look like name=v1,v2")))?;
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(Error::Config(format!("axis `{axis}` has no values")));
        }
        let bool_of = |s: &str| match s {
            "true" | "on" => Ok(true),
            "false" | "off" => Ok(false),
            _ => Err(Error::Config(format!("`{s}` is not a boolean"))),
        };
        let f64_of = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("`{s}` is not a number")))
        };
        match axis.trim() {
            "framework" => self.framework = items.into_iter().map(Framework::parse).collect::<Result<_>>()?,
            "mask" => self.mask = items.into_iter().map(bool_of).collect::<Result<_>>()?,
            "spatial" => self.spatial = items.into_iter().map(bool_of).collect::<Result<_>>()?,
            "mask_ratio" => self.mask_ratio = items.into_iter().map(f64_of).collect::<Result<_>>()?,
            "w" => self.w = items.into_iter().map(f64_of).collect::<Result<_>>()?,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation axis `{other}` (framework, mask, spatial, mask_ratio, w)"
                )))
            }
        }
        Ok(())
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Cartesian product of the axes in a fixed order (framework, mask,
/// spatial, mask_ratio, w). Every point keeps the base seed.
pub fn grid_points(base: &RunConfig, axes: &AblationAxes) -> Vec<RunConfig> {
    let mut points = vec![(base.clone(), Vec::<String>::new())];
    fn expand<T: Copy>(
        points: Vec<(RunConfig, Vec<String>)>,
        values: &[T],
        set: impl Fn(&mut RunConfig, T),
        tag: impl Fn(T) -> String,
    ) -> Vec<(RunConfig, Vec<String>)> {
        if values.is_empty() {
            return points;
        }
        let mut out = Vec::with_capacity(points.len() * values.len());
        for (cfg, tags) in points {
            for &v in values {
                let mut c = cfg.clone();
                set(&mut c, v);
                let mut t = tags.clone();
                t.push(tag(v));
                out.push((c, t));
            }
        }
        out
    }
    points = expand(points, &axes.framework, |c, v| c.framework = v, |v| v.name().to_string());
    points = expand(points, &axes.mask, |c, v| c.augment.mask = v, |v| format!("mask-{v}"));
    points = expand(points, &axes.spatial, |c, v| c.augment.spatial = v, |v| format!("spatial-{v}"));
    points = expand(
        points,
        &axes.mask_ratio,
        |c, v| c.augment.mask_ratio = v,
        |v| format!("ratio-{}", fmt_f64(v)),
    );
    points = expand(points, &axes.w, |c, v| c.loss.w = v, |v| format!("w-{}", fmt_f64(v)));
    points
        .into_iter()
        .map(|(mut cfg, tags)| {
            if !tags.is_empty() {
                cfg.run_id = format!("{}_{}", base.run_id, tags.join("_"));
            }
            cfg
        })
        .collect()
}

/// Run every grid point under `out_root/<run_id>`; with `finetune`, each
/// pre-trained encoder is also fine-tuned into `out_root/<run_id>-ft`.
pub fn run_ablation_grid(
    base: &RunConfig,
    axes: &AblationAxes,
    ds: &Dataset,
    out_root: &Path,
    finetune: bool,
    force: bool,
) -> Result<Vec<RunOutcome>> {
    let points = grid_points(base, axes);
    for cfg in &points {
        cfg.validate()?;
    }
    let mut out = Vec::new();
    for cfg in points {
        let dir = out_root.join(&cfg.run_id);
        prepare_run_dir(&dir, force)?;
        let pre = pretrain_on(&cfg, ds, &dir)?;
        if finetune {
            let mut ft = cfg.clone();
            ft.run_id = format!("{}-ft", cfg.run_id);
            ft.finetune.init_checkpoint = Some(pre.final_checkpoint());
            let ft_dir = out_root.join(&ft.run_id);
            prepare_run_dir(&ft_dir, force)?;
            out.push(pre);
            out.push(finetune_on(&ft, ds, &ft_dir)?);
        } else {
            out.push(pre);
        }
    }
    let dirs: Vec<_> = out.iter().map(|o| o.dir.clone()).collect();
    let (runs, _) = crate::report::load_runs(&dirs);
    let path = out_root.join("ablation.md");
    std::fs::write(&path, crate::report::comparison_table(&runs)).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}
