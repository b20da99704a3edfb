//! `trot`: data generation, pre-training, fine-tuning, ablation grids,
//! collapse diagnostics and run reports.

mod diagnose;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trot::data::{generate_dataset, load_dataset, save_dataset, DatasetSpec};
use trot::training::{
    apply_override, finetune_on, pretrain_on, run_ablation_grid, AblationAxes, RunConfig,
};
use trot::training::record::prepare_run_dir;
use trot::{Error, Result};

#[derive(Parser)]
#[command(name = "trot", version, about = "Token-level rotate-and-restore pre-training on synthetic volumes")]
#[command(after_help = "Config keys may be overridden with `--key=value` (dotted keys such as `--loss.w=5`) \
or `--set key=value`. TROT_PRECISION=f32|f64 overrides the numeric precision.")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML).
    config: PathBuf,
    /// Parent of the run directory, which is named after `run_id`.
    #[arg(long, default_value = "runs")]
    out_root: PathBuf,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
    /// `key=value` config override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    GenData {
        /// Dataset spec (TOML); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data/synth")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Self-supervised pre-training.
    Pretrain(RunArgs),
    /// Segmentation fine-tuning, from scratch or from a checkpoint.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Pre-trained checkpoint; overrides `finetune.init_checkpoint`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Pre-train (and optionally fine-tune) every point of an ablation grid.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// `axis=v1,v2,...` with axis one of framework, mask, spatial,
        /// mask_ratio, w; repeatable.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        #[arg(long)]
        finetune: bool,
    },
    /// Collapse diagnostics of a checkpoint's encoder on a dataset.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_volumes: usize,
        #[arg(long, default_value = "runs/diagnose")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Comparison table and plots of finished runs.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "runs/report")]
        out: PathBuf,
    },
}

/// Long flags of the config-driven commands; any other `--key=value` is an
/// override.
const FLAGS: [&str; 9] = ["config", "out", "out-root", "force", "set", "init", "axis", "finetune", "help"];

/// Move `--key=value` overrides out of the arguments of config-driven
/// commands.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let takes_overrides = matches!(
        args.get(1).map(String::as_str),
        Some("gen-data" | "pretrain" | "finetune" | "ablate")
    );
    if !takes_overrides {
        return (args, Vec::new());
    }
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            Some((key, _)) if !FLAGS.contains(&key) => overrides.push(a[2..].to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidFractions(_)
        | Error::InvalidFraction(_)
        | Error::MaskRatioTooHigh(_)
        | Error::InvalidAugmentation(_)
        | Error::WindowMismatch { .. }
        | Error::CheckpointMismatch(_) => 2,
        Error::Io { .. }
        | Error::Format { .. }
        | Error::InvalidSpec(_)
        | Error::MissingRecord(_)
        | Error::EmptyLabeledSet
        | Error::ShapeMismatch(_) => 3,
        Error::NonFiniteLoss { .. } | Error::NonFiniteActivation(_) => 4,
        _ => 1,
    }
}

fn apply_all<T: serde::Serialize + serde::de::DeserializeOwned>(value: &mut T, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` must look like key=value")))?;
        apply_override(value, k.trim(), v.trim())?;
    }
    Ok(())
}

fn load_config(args: &RunArgs, overrides: &[String]) -> Result<RunConfig> {
    if !args.config.is_file() {
        return Err(Error::Config(format!("config file {} not found", args.config.display())));
    }
    let mut cfg = RunConfig::load(&args.config)?;
    apply_all(&mut cfg, &args.set)?;
    apply_all(&mut cfg, overrides)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(args: &RunArgs, cfg: &RunConfig) -> Result<PathBuf> {
    let id = &cfg.run_id;
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Config(format!("run_id `{id}` is not a valid directory name")));
    }
    let dir = args.out_root.join(id);
    prepare_run_dir(&dir, args.force)?;
    Ok(dir)
}

fn gen_data(config: Option<&Path>, out: &Path, force: bool, overrides: &[String]) -> Result<()> {
    let mut spec = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|_| Error::Config(format!("config file {} not found", p.display())))?;
            toml::from_str::<DatasetSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => DatasetSpec::default(),
    };
    apply_all(&mut spec, overrides)?;
    spec.validate()?;
    if out.join("index.txt").exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already holds a dataset (use --force to overwrite)",
                out.display()
            )));
        }
        std::fs::remove_dir_all(out).map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        })?;
    }
    let ds = generate_dataset(&spec)?;
    save_dataset(&ds, out)?;
    let spec_path = out.join("spec.toml");
    let text = toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&spec_path, text).map_err(|e| Error::Io {
        path: spec_path,
        source: e,
    })?;
    println!("wrote {} volumes to {}", ds.volumes.len(), out.display());
    Ok(())
}

fn report(dirs: &[PathBuf], out: &Path) -> Result<()> {
    let (runs, errors) = trot::report::load_runs(dirs);
    for e in &errors {
        eprintln!("warning: {e}");
    }
    if runs.is_empty() {
        return Err(errors.into_iter().next().unwrap_or(Error::Config("no run directories given".into())));
    }
    for f in trot::report::write_report(&runs, out)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn dispatch(cli: Cli, overrides: &[String]) -> Result<()> {
    match cli.cmd {
        Command::GenData { config, out, force, set } => {
            let all: Vec<String> = set.into_iter().chain(overrides.iter().cloned()).collect();
            gen_data(config.as_deref(), &out, force, &all)
        }
        Command::Pretrain(args) => {
            let cfg = load_config(&args, overrides)?;
            let ds = load_dataset(&cfg.dataset)?;
            let dir = run_dir(&args, &cfg)?;
            let out = pretrain_on(&cfg, &ds, &dir)?;
            println!("{}", out.dir.display());
            Ok(())
        }
        Command::Finetune { run, init } => {
            let mut cfg = load_config(&run, overrides)?;
            if let Some(p) = init {
                cfg.finetune.init_checkpoint = Some(p);
            }
            let ds = load_dataset(&cfg.dataset)?;
            let dir = run_dir(&run, &cfg)?;
            let out = finetune_on(&cfg, &ds, &dir)?;
            println!("{}", out.dir.display());
            if let Some(d) = out.summary.mean_dice {
                println!("mean dice {d:.4}");
            }
            Ok(())
        }
        Command::Ablate { run, axes, finetune } => {
            let cfg = load_config(&run, overrides)?;
            let mut grid = AblationAxes::default();
            for a in &axes {
                grid.add_spec(a)?;
            }
            let ds = load_dataset(&cfg.dataset)?;
            let root = run.out_root.join(&cfg.run_id);
            let outs = run_ablation_grid(&cfg, &grid, &ds, &root, finetune, run.force)?;
            for o in outs {
                println!("{}", o.dir.display());
            }
            Ok(())
        }
        Command::Diagnose {
            checkpoint,
            dataset,
            n_volumes,
            out,
            force,
        } => diagnose::run(&checkpoint, &dataset, n_volumes, &out, force),
        Command::Report { dirs, out } => report(&dirs, &out),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
