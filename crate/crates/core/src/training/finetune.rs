use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::SliceRandom;

use crate::checkpoint::{load_encoder_checkpoint, save_checkpoint, CheckpointMeta, ENCODER_PREFIX};
use crate::data::{split_dataset, subsample_labeled, Dataset, Volume};
use crate::decoder::{decode, init_decoder, one_hot, predict_labels, segmentation_loss};
use crate::encoder::{new_encoder_state, volumes_to_tensor, Encoder};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_segmentation, ClassScore};
use crate::params::{scalar_f64, ParamStore};
use crate::training::config::RunConfig;
use crate::training::optim::{poly_lr, Sgd};
use crate::training::record::{ClassSummary, Record, RunOutcome, RunWriter, Summary, CHECKPOINT_DIR};
use crate::training::{check_volumes, stream_rng, DECODER_STREAM, FINETUNE_ORDER_STREAM};

/// Encoder (fresh, or copied from `init`) plus a freshly drawn decoder.
pub fn init_segmentation_model(cfg: &RunConfig, n_classes: usize, init: Option<&Path>) -> Result<ParamStore> {
    let mut store = new_encoder_state(&cfg.encoder, cfg.dtype(), cfg.seed)?;
    if let Some(path) = init {
        let ckpt = load_encoder_checkpoint(path, &cfg.encoder)?;
        let lead = format!("{ENCODER_PREFIX}.");
        for (name, var) in ckpt.store.iter().filter(|(n, _)| n.starts_with(&lead)) {
            store.set(name, var.as_tensor())?;
        }
    }
    init_decoder(
        &cfg.encoder,
        &cfg.finetune.decoder,
        n_classes,
        &mut store,
        &mut stream_rng(cfg.seed, DECODER_STREAM),
    )?;
    Ok(store)
}

/// Per-voxel logits `(B, D, H, W, K+1)`.
pub fn segment(cfg: &RunConfig, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let out = Encoder::new(&cfg.encoder, store, ENCODER_PREFIX).forward(x)?;
    decode(&cfg.encoder, &out, x, store)
}

pub fn segmentation_batch_loss(
    cfg: &RunConfig,
    store: &ParamStore,
    batch: &[&Volume],
    n_classes: usize,
) -> Result<(Tensor, BTreeMap<String, f64>)> {
    let x = volumes_to_tensor(batch, store.dtype())?;
    let labels: Vec<&[u8]> = batch.iter().map(|v| v.label.as_slice()).collect();
    let y = one_hot(&labels, cfg.encoder.input_shape, n_classes, store.dtype())?;
    let (total, ce, dice) = segmentation_loss(&segment(cfg, store, &x)?, &y)?;
    let parts = BTreeMap::from([
        ("cross_entropy".to_string(), scalar_f64(&ce)?),
        ("soft_dice".to_string(), scalar_f64(&dice)?),
    ]);
    Ok((total, parts))
}

/// Scores of every volume, in input order.
pub fn evaluate_volumes(
    cfg: &RunConfig,
    store: &ParamStore,
    volumes: &[Volume],
    n_classes: usize,
) -> Result<Vec<Vec<ClassScore>>> {
    let mut out = Vec::with_capacity(volumes.len());
    for chunk in volumes.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Volume> = chunk.iter().collect();
        let logits = segment(cfg, store, &volumes_to_tensor(&refs, store.dtype())?)?.detach();
        for (v, pred) in chunk.iter().zip(predict_labels(&logits)?) {
            out.push(evaluate_segmentation(&pred, &v.label, v.shape, v.spacing, n_classes)?);
        }
    }
    Ok(out)
}

/// Per-class means over volumes; a single infinite distance makes the
/// class mean infinite.
pub fn summarize_scores(scores: &[Vec<ClassScore>], n_classes: usize) -> Vec<ClassSummary> {
    (0..n_classes)
        .map(|k| {
            let n = scores.len().max(1) as f64;
            ClassSummary {
                class: k as u8 + 1,
                dice: scores.iter().map(|s| s[k].dice).sum::<f64>() / n,
                hd95: scores.iter().map(|s| s[k].hd95).sum::<f64>() / n,
            }
        })
        .collect()
}

fn push_eval(w: &mut RunWriter, step: usize, test: &[Volume], scores: &[Vec<ClassScore>]) -> Result<()> {
    for (v, s) in test.iter().zip(scores) {
        for c in s {
            w.push(Record::Eval {
                step,
                volume: v.id.clone(),
                class: c.class,
                dice: c.dice,
                hd95: c.hd95,
            })?;
        }
    }
    Ok(())
}

/// Fine-tune encoder + decoder on the labeled subset of the training split
/// and evaluate on the test split.
pub fn finetune_on(cfg: &RunConfig, ds: &Dataset, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    check_volumes(cfg, &ds.volumes)?;
    let ft = &cfg.finetune;
    let (train, _, test) = split_dataset(&ds.volumes, cfg.split, cfg.split_seed)?;
    let labeled = subsample_labeled(&train, ft.labeled_fraction, cfg.seed)?;
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    if test.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    let n_classes = ds.n_classes;
    let store = init_segmentation_model(cfg, n_classes, ft.init_checkpoint.as_deref())?;
    let per_epoch = labeled.len().div_ceil(cfg.batch_size);
    let total = per_epoch * ft.epochs;
    let mut w = RunWriter::create(out_dir, &cfg.to_toml()?)?;
    let mut opt = Sgd::new(ft.optim.clone());
    let mut order_rng = stream_rng(cfg.seed, FINETUNE_ORDER_STREAM);
    let mut step = 0;
    let mut last_loss = f64::NAN;
    let mut scores = None;
    let meta = |step: usize| CheckpointMeta {
        kind: "finetune".into(),
        framework: cfg.framework.name().into(),
        step: step as u64,
        encoder: cfg.encoder.clone(),
    };
    for epoch in 0..ft.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut order_rng);
        for idx in order.chunks(cfg.batch_size) {
            let start = Instant::now();
            let batch: Vec<&Volume> = idx.iter().map(|&i| &labeled[i]).collect();
            let lr = poly_lr(ft.optim.lr, step, total, ft.optim.poly_power);
            let computed = segmentation_batch_loss(cfg, &store, &batch, n_classes).and_then(|(loss, parts)| {
                let value = scalar_f64(&loss)?;
                if value.is_finite() {
                    Ok((loss, parts, value))
                } else {
                    Err(Error::NonFiniteLoss { step })
                }
            });
            let (loss, components, value) = match computed {
                Ok(c) => c,
                Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteActivation(_))) => {
                    let path = format!("{CHECKPOINT_DIR}/last_good.ckpt");
                    save_checkpoint(&out_dir.join(&path), &meta(step), &store)?;
                    w.push(Record::Checkpoint { step, path })?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            opt.step(&loss.backward()?, &store, lr)?;
            last_loss = value;
            w.push(Record::Step {
                step,
                epoch,
                lr,
                loss: value,
                components,
            })?;
            w.time(step, start.elapsed().as_secs_f64())?;
            step += 1;
            if ft.eval_every > 0 && step % ft.eval_every == 0 {
                let s = evaluate_volumes(cfg, &store, &test, n_classes)?;
                push_eval(&mut w, step, &test, &s)?;
                scores = Some(s);
            }
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < total {
                let path = format!("{CHECKPOINT_DIR}/step_{step:06}.ckpt");
                save_checkpoint(&out_dir.join(&path), &meta(step), &store)?;
                w.push(Record::Checkpoint { step, path })?;
            }
        }
    }
    let scores = match scores {
        Some(s) if ft.eval_every > 0 && step % ft.eval_every == 0 => s,
        _ => {
            let s = evaluate_volumes(cfg, &store, &test, n_classes)?;
            push_eval(&mut w, step, &test, &s)?;
            s
        }
    };
    let checkpoint = format!("{CHECKPOINT_DIR}/final.ckpt");
    save_checkpoint(&out_dir.join(&checkpoint), &meta(step), &store)?;
    w.push(Record::Checkpoint {
        step,
        path: checkpoint.clone(),
    })?;
    let classes = summarize_scores(&scores, n_classes);
    let mean_dice = classes.iter().map(|c| c.dice).sum::<f64>() / classes.len().max(1) as f64;
    w.finish(Summary {
        run_id: cfg.run_id.clone(),
        mode: "finetune".into(),
        framework: if ft.init_checkpoint.is_some() { cfg.framework.name() } else { "scratch" }.into(),
        steps: step,
        final_loss: last_loss,
        collapse: BTreeMap::new(),
        classes,
        mean_dice: Some(mean_dice),
        labeled_fraction: Some(ft.labeled_fraction),
        n_labeled: Some(labeled.len()),
        init_checkpoint: ft.init_checkpoint.as_ref().map(|p| p.display().to_string()),
        checkpoint,
    })
}
