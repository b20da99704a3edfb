use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::serde_inf;

pub const RECORD_FILE: &str = "record.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of `record.jsonl`. Wall-clock time is kept out of these records
/// (it lives in `timing.jsonl`) so that records are reproducible bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        loss: f64,
        components: BTreeMap<String, f64>,
    },
    Collapse {
        step: usize,
        metric: String,
        value: f64,
    },
    Eval {
        step: usize,
        volume: String,
        class: u8,
        dice: f64,
        #[serde(with = "serde_inf")]
        hd95: f64,
    },
    Checkpoint {
        step: usize,
        path: String,
    },
}

impl Record {
    pub fn step(&self) -> usize {
        match self {
            Record::Step { step, .. }
            | Record::Collapse { step, .. }
            | Record::Eval { step, .. }
            | Record::Checkpoint { step, .. } => *step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: u8,
    pub dice: f64,
    #[serde(with = "serde_inf")]
    pub hd95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run_id: String,
    /// `pretrain` or `finetune`.
    pub mode: String,
    pub framework: String,
    pub steps: usize,
    pub final_loss: f64,
    /// Last collapse diagnostics (pre-training).
    pub collapse: BTreeMap<String, f64>,
    /// Mean over test volumes, per class (fine-tuning).
    pub classes: Vec<ClassSummary>,
    pub mean_dice: Option<f64>,
    pub labeled_fraction: Option<f64>,
    pub n_labeled: Option<usize>,
    pub init_checkpoint: Option<String>,
    /// Final checkpoint, relative to the run directory.
    pub checkpoint: String,
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
    pub records: Vec<Record>,
}

impl RunOutcome {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join(&self.summary.checkpoint)
    }
}

/// Streams records of one run to disk.
pub struct RunWriter {
    pub dir: PathBuf,
    records: fs::File,
    timing: fs::File,
    pub kept: Vec<Record>,
}

/// Create `dir` for a new run. An existing run directory is only replaced
/// when `force` is set.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.join(RECORD_FILE).exists() || dir.join(SUMMARY_FILE).exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already holds a run (use --force to overwrite)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

impl RunWriter {
    pub fn create(dir: &Path, config_toml: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, config_toml).map_err(|e| Error::io(&cfg_path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            records: create(&dir.join(RECORD_FILE))?,
            timing: create(&dir.join(TIMING_FILE))?,
            kept: Vec::new(),
        })
    }

    pub fn push(&mut self, r: Record) -> Result<()> {
        let line = serde_json::to_string(&r).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(self.records, "{line}").map_err(|e| Error::io(self.dir.join(RECORD_FILE), e))?;
        self.kept.push(r);
        Ok(())
    }

    pub fn time(&mut self, step: usize, seconds: f64) -> Result<()> {
        writeln!(self.timing, "{{\"step\":{step},\"seconds\":{seconds}}}")
            .map_err(|e| Error::io(self.dir.join(TIMING_FILE), e))
    }

    pub fn finish(self, summary: Summary) -> Result<RunOutcome> {
        let path = self.dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(RunOutcome {
            dir: self.dir,
            summary,
            records: self.kept,
        })
    }
}

pub fn read_records(dir: &Path) -> Result<Vec<Record>> {
    let path = dir.join(RECORD_FILE);
    let f = fs::File::open(&path).map_err(|_| Error::MissingRecord(dir.to_path_buf()))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::format(&path, format!("line {}", i + 1), e.to_string()))
        })
        .collect()
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingRecord(dir.to_path_buf()))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, "summary", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r");
        prepare_run_dir(&run, false).unwrap();
        let mut w = RunWriter::create(&run, "seed = 1\n").unwrap();
        let recs = vec![
            Record::Step {
                step: 0,
                epoch: 0,
                lr: 0.1,
                loss: 1.5,
                components: BTreeMap::from([("ce".to_string(), 1.0)]),
            },
            Record::Eval {
                step: 1,
                volume: "0003".into(),
                class: 2,
                dice: 0.0,
                hd95: f64::INFINITY,
            },
        ];
        for r in &recs {
            w.push(r.clone()).unwrap();
        }
        w.time(0, 0.25).unwrap();
        let summary = Summary {
            run_id: "r".into(),
            mode: "pretrain".into(),
            framework: "simtrot".into(),
            steps: 2,
            final_loss: 1.5,
            collapse: BTreeMap::new(),
            classes: vec![ClassSummary { class: 1, dice: 0.5, hd95: f64::INFINITY }],
            mean_dice: None,
            labeled_fraction: None,
            n_labeled: None,
            init_checkpoint: None,
            checkpoint: "checkpoints/final.ckpt".into(),
        };
        w.finish(summary.clone()).unwrap();
        assert_eq!(read_records(&run).unwrap(), recs);
        assert_eq!(read_summary(&run).unwrap(), summary);
        assert!(prepare_run_dir(&run, false).is_err());
        prepare_run_dir(&run, true).unwrap();
        assert!(matches!(read_records(&run), Err(Error::MissingRecord(_))));
    }
}
