//! Read-only comparison of finished runs: a markdown table and SVG curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::plot::{Chart, Series};
use crate::training::record::{read_records, read_summary, Record, Summary, CONFIG_FILE};

#[derive(Clone, Debug)]
pub struct RunView {
    pub dir: PathBuf,
    /// Effective config flattened to dotted keys.
    pub config: BTreeMap<String, toml::Value>,
    pub summary: Summary,
    pub records: Vec<Record>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

pub fn load_run(dir: &Path) -> Result<RunView> {
    let summary = read_summary(dir)?;
    let records = read_records(dir)?;
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingRecord(dir.to_path_buf()))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::format(&path, "config", e.to_string()))?;
    let mut config = BTreeMap::new();
    flatten("", &table, &mut config);
    Ok(RunView {
        dir: dir.to_path_buf(),
        config,
        summary,
        records,
    })
}

/// Loaded runs plus the errors of directories that could not be read.
pub fn load_runs(dirs: &[PathBuf]) -> (Vec<RunView>, Vec<Error>) {
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    for d in dirs {
        match load_run(d) {
            Ok(r) => runs.push(r),
            Err(e) => errors.push(e),
        }
    }
    (runs, errors)
}

/// Keys that never distinguish runs in a meaningful way.
const IGNORED_KEYS: [&str; 3] = ["run_id", "finetune.init_checkpoint", "dataset"];

/// Config keys whose values differ between runs.
pub fn swept_keys(runs: &[RunView]) -> Vec<String> {
    let all: BTreeSet<&String> = runs.iter().flat_map(|r| r.config.keys()).collect();
    all.into_iter()
        .filter(|k| !IGNORED_KEYS.contains(&k.as_str()))
        .filter(|k| {
            let vals: Vec<Option<&toml::Value>> = runs.iter().map(|r| r.config.get(*k)).collect();
            vals.windows(2).any(|w| w[0] != w[1])
        })
        .cloned()
        .collect()
}

fn as_number(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Integer(i) => Some(*i as f64),
        toml::Value::Float(f) => Some(*f),
        _ => None,
    }
}

fn show_value(v: Option<&toml::Value>) -> String {
    match v {
        None => "-".into(),
        Some(toml::Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

fn fmt(x: Option<f64>) -> String {
    match x {
        None => "-".into(),
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) if v.is_nan() => "nan".into(),
        Some(v) => format!("{v:.4}"),
    }
}

pub fn mean_hd95(s: &Summary) -> Option<f64> {
    if s.classes.is_empty() {
        return None;
    }
    Some(s.classes.iter().map(|c| c.hd95).sum::<f64>() / s.classes.len() as f64)
}

/// Markdown table with one row per run: identity columns, the swept config
/// keys, then the headline metrics.
pub fn comparison_table(runs: &[RunView]) -> String {
    let swept = swept_keys(runs);
    let mut header = vec!["run".to_string(), "mode".into(), "framework".into()];
    header.extend(swept.iter().cloned());
    header.extend(
        [
            "steps",
            "final_loss",
            "cross_volume_same_position",
            "within_volume_cross_position",
            "positive_pair",
            "mean_dice",
            "mean_hd95",
        ]
        .map(String::from),
    );
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in runs {
        let s = &r.summary;
        let mut row = vec![s.run_id.clone(), s.mode.clone(), s.framework.clone()];
        row.extend(swept.iter().map(|k| show_value(r.config.get(k))));
        row.push(s.steps.to_string());
        row.push(fmt(Some(s.final_loss)));
        for key in ["cross_volume_same_position", "within_volume_cross_position", "positive_pair"] {
            row.push(fmt(s.collapse.get(key).copied()));
        }
        row.push(fmt(s.mean_dice));
        row.push(fmt(mean_hd95(s)));
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out
}

/// `(value of key, metric)` per run, sorted by the key's numeric value.
pub fn sweep_curve(runs: &[RunView], key: &str, metric: impl Fn(&Summary) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = runs
        .iter()
        .filter_map(|r| Some((as_number(r.config.get(key)?)?, metric(&r.summary)?)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

fn step_series(runs: &[RunView], pick: impl Fn(&Record) -> Option<(f64, f64)>) -> Vec<Series> {
    runs.iter()
        .map(|r| Series {
            name: r.summary.run_id.clone(),
            points: r.records.iter().filter_map(&pick).collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect()
}

fn headline(s: &Summary) -> Option<f64> {
    s.mean_dice.or_else(|| s.collapse.get("cross_volume_same_position").copied())
}

/// Write `report.md` and the SVG charts into `out`; returns the files written.
pub fn write_report(runs: &[RunView], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    let mut charts: Vec<(String, Chart)> = Vec::new();

    let loss = step_series(runs, |r| match r {
        Record::Step { step, loss, .. } => Some((*step as f64, *loss)),
        _ => None,
    });
    if !loss.is_empty() {
        charts.push((
            "loss.svg".into(),
            Chart {
                title: "Training loss".into(),
                x_label: "step".into(),
                y_label: "loss".into(),
                series: loss,
                scatter: false,
            },
        ));
    }
    for metric in ["cross_volume_same_position", "within_volume_cross_position", "positive_pair"] {
        let series = step_series(runs, |r| match r {
            Record::Collapse { step, metric: m, value } if m == metric => Some((*step as f64, *value)),
            _ => None,
        });
        if !series.is_empty() {
            charts.push((
                format!("collapse_{metric}.svg"),
                Chart {
                    title: metric.replace('_', " "),
                    x_label: "step".into(),
                    y_label: "mean cosine".into(),
                    series,
                    scatter: false,
                },
            ));
        }
    }

    // Dice against labeled fraction, one curve per initialization.
    let finetuned: Vec<&RunView> = runs.iter().filter(|r| r.summary.mode == "finetune").collect();
    let fractions: BTreeSet<u64> = finetuned
        .iter()
        .filter_map(|r| r.summary.labeled_fraction.map(f64::to_bits))
        .collect();
    if fractions.len() > 1 {
        let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &finetuned {
            if let (Some(f), Some(d)) = (r.summary.labeled_fraction, r.summary.mean_dice) {
                groups.entry(r.summary.framework.clone()).or_default().push((f * 100.0, d));
            }
        }
        let series = groups
            .into_iter()
            .map(|(name, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { name, points }
            })
            .collect();
        charts.push((
            "dice_vs_labeled_fraction.svg".into(),
            Chart {
                title: "Dice vs. labeled data".into(),
                x_label: "labeled training volumes (%)".into(),
                y_label: "mean Dice".into(),
                series,
                scatter: false,
            },
        ));
    }

    let swept = swept_keys(runs);
    for key in swept.iter().filter(|k| k.as_str() != "finetune.labeled_fraction") {
        let pts = sweep_curve(runs, key, headline);
        if pts.len() < 2 {
            continue;
        }
        let metric = if runs.iter().any(|r| r.summary.mean_dice.is_some()) {
            "mean Dice"
        } else {
            "cross-volume same-position cosine"
        };
        charts.push((
            format!("sweep_{}.svg", key.replace('.', "_")),
            Chart {
                title: format!("{metric} vs. {key}"),
                x_label: key.clone(),
                y_label: metric.into(),
                series: vec![Series {
                    name: key.clone(),
                    points: pts,
                }],
                scatter: false,
            },
        ));
    }

    let mut md = String::from("# Run comparison\n\n");
    md.push_str(&comparison_table(runs));
    if !charts.is_empty() {
        md.push_str("\n## Charts\n\n");
    }
    for (name, chart) in &charts {
        let path = out.join(name);
        fs::write(&path, chart.render()).map_err(|e| Error::io(&path, e))?;
        md.push_str(&format!("![{}]({name})\n\n", chart.title));
        files.push(path);
    }
    let path = out.join("report.md");
    fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    files.insert(0, path);
    Ok(files)
}
