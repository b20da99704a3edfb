use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::augment::{make_view_pair, ViewPair};
use crate::checkpoint::{save_checkpoint, CheckpointMeta, ENCODER_PREFIX};
use crate::data::{split_dataset, Dataset, Volume};
use crate::encoder::{new_encoder_state, volumes_to_tensor, Encoder, TokenGrid};
use crate::error::{Error, Result};
use crate::objectives::{
    apply_head, byol_token_loss, collapse_metrics, global_simclr_loss, init_head, pool_tokens, token_contrastive_loss,
    weighted_token_contrastive_loss, CollapseReport, Framework, TokenBatch,
};
use crate::params::{ema_update, scalar_f64, ParamStore};
use crate::spatial::restore_token_batch;
use crate::training::config::RunConfig;
use crate::training::optim::{poly_lr, Sgd};
use crate::training::record::{Record, RunOutcome, RunWriter, Summary, CHECKPOINT_DIR};
use crate::training::{check_volumes, stream_rng, AUG_STREAM, EVAL_STREAM, HEAD_STREAM, ORDER_STREAM};

/// Online branch (`encoder.*`, `proj.*`), BYOL predictor (`pred.*`) and the
/// EMA target (`encoder.*`, `proj.*`). `trainable` shares its variables with
/// `online` and `predictor`.
#[derive(Debug)]
pub struct PretrainModel {
    pub online: ParamStore,
    pub predictor: ParamStore,
    pub target: Option<ParamStore>,
    pub trainable: ParamStore,
}

impl PretrainModel {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let dtype = cfg.dtype();
        let mut online = new_encoder_state(&cfg.encoder, dtype, cfg.seed)?;
        let mut rng = stream_rng(cfg.seed, HEAD_STREAM);
        let p = cfg.loss.proj_dim;
        init_head(&mut online, "proj", cfg.encoder.out_dim(), p, &mut rng)?;
        let mut predictor = ParamStore::new(dtype);
        let mut target = None;
        if cfg.framework == Framework::Btrot {
            init_head(&mut predictor, "pred", p, p, &mut rng)?;
            target = Some(online.deep_clone()?);
        }
        let trainable = ParamStore::shared_union(&[&online, &predictor])?;
        Ok(Self {
            online,
            predictor,
            target,
            trainable,
        })
    }
}

/// Steps per epoch: batches of `batch_size`, except that the global
/// baseline drops a trailing single-volume batch (it needs two volumes).
pub fn steps_per_epoch(cfg: &RunConfig, n_train: usize) -> usize {
    let full = n_train / cfg.batch_size;
    let rest = n_train % cfg.batch_size;
    let min_batch = if cfg.framework == Framework::GlobalSimclr { 2 } else { 1 };
    full + usize::from(rest >= min_batch)
}

/// Training order of one epoch: a fresh shuffle, cut into batches.
pub fn epoch_batches(cfg: &RunConfig, n_train: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(rng);
    let min_batch = if cfg.framework == Framework::GlobalSimclr { 2 } else { 1 };
    order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= min_batch)
        .map(|c| c.to_vec())
        .collect()
}

/// Encoder outputs of both views, the rotated one restored to the frame of
/// the other.
pub struct EncodedViews {
    pub restored: TokenGrid,
    pub masked: TokenGrid,
}

pub fn encode_views(cfg: &RunConfig, store: &ParamStore, pairs: &[ViewPair]) -> Result<EncodedViews> {
    let dtype = store.dtype();
    let rotated: Vec<&Volume> = pairs.iter().map(|p| &p.view_rotated).collect();
    let masked: Vec<&Volume> = pairs.iter().map(|p| &p.view_masked).collect();
    let transforms: Vec<_> = pairs.iter().map(|p| p.transform).collect();
    let enc = Encoder::new(&cfg.encoder, store, ENCODER_PREFIX);
    let gr = enc.encode(&volumes_to_tensor(&rotated, dtype)?)?;
    let gm = enc.encode(&volumes_to_tensor(&masked, dtype)?)?;
    Ok(EncodedViews {
        restored: restore_token_batch(&gr, &transforms)?,
        masked: gm,
    })
}

pub fn make_pairs(cfg: &RunConfig, batch: &[&Volume], rng: &mut ChaCha8Rng) -> Result<Vec<ViewPair>> {
    let patch_sizes = cfg.encoder.patch_sizes();
    batch
        .iter()
        .map(|v| make_view_pair(v, &cfg.augment, &patch_sizes, rng))
        .collect()
}

/// The configured objective on one batch of view pairs.
pub fn pretrain_loss(
    cfg: &RunConfig,
    model: &PretrainModel,
    pairs: &[ViewPair],
) -> Result<(Tensor, BTreeMap<String, f64>)> {
    let store = &model.trainable;
    let online = encode_views(cfg, store, pairs)?;
    let l = &cfg.loss;
    let mut parts = BTreeMap::new();
    let loss = match cfg.framework {
        Framework::Simtrot | Framework::SimtrotW => {
            let zr = apply_head(&online.restored.flatten_positions()?, store, "proj")?;
            let zm = apply_head(&online.masked.flatten_positions()?, store, "proj")?;
            let tb = TokenBatch::from_views(&zr, &zm)?;
            let (name, loss) = if cfg.framework == Framework::Simtrot {
                ("contrastive", token_contrastive_loss(&tb, l.tau, l.symmetrize)?)
            } else {
                ("weighted_contrastive", weighted_token_contrastive_loss(&tb, l.tau, l.w, l.symmetrize)?)
            };
            parts.insert(name.to_string(), scalar_f64(&loss)?);
            loss
        }
        Framework::GlobalSimclr => {
            let er = apply_head(&pool_tokens(&online.restored)?, store, "proj")?;
            let em = apply_head(&pool_tokens(&online.masked)?, store, "proj")?;
            let loss = global_simclr_loss(&Tensor::stack(&[er, em], 1)?, l.tau, l.symmetrize)?;
            parts.insert("global_contrastive".into(), scalar_f64(&loss)?);
            loss
        }
        Framework::Btrot => {
            let target_store = model
                .target
                .as_ref()
                .ok_or_else(|| Error::Config("BYOL model has no target branch".into()))?;
            let target = encode_views(cfg, target_store, pairs)?;
            let ab = byol_token_loss(&online.restored, &target.masked, store, target_store)?;
            parts.insert("byol_rotated_to_masked".into(), scalar_f64(&ab)?);
            if l.symmetrize {
                let ba = byol_token_loss(&online.masked, &target.restored, store, target_store)?;
                parts.insert("byol_masked_to_rotated".into(), scalar_f64(&ba)?);
                (ab + ba)?
            } else {
                ab
            }
        }
    };
    Ok((loss, parts))
}

/// Collapse diagnostics of the projected tokens of `volumes` (unaugmented),
/// plus the positive-pair cosine over one fixed set of view pairs.
pub fn collapse_eval(cfg: &RunConfig, model: &PretrainModel, volumes: &[&Volume]) -> Result<CollapseReport> {
    let store = &model.online;
    let enc = Encoder::new(&cfg.encoder, store, ENCODER_PREFIX);
    let tokens = enc.encode(&volumes_to_tensor(volumes, store.dtype())?)?;
    let z = apply_head(&tokens.flatten_positions()?, store, "proj")?.detach();
    let mut report = collapse_metrics(&z, None)?;
    let pairs = make_pairs(cfg, volumes, &mut stream_rng(cfg.seed, EVAL_STREAM))?;
    let views = encode_views(cfg, store, &pairs)?;
    let zr = apply_head(&views.restored.flatten_positions()?, store, "proj")?.detach();
    let zm = apply_head(&views.masked.flatten_positions()?, store, "proj")?.detach();
    report.positive_pair = collapse_metrics(&zm, Some(&zr))?.positive_pair;
    Ok(report)
}

/// Pre-training state between steps.
pub struct Pretrainer<'a> {
    pub cfg: &'a RunConfig,
    pub model: PretrainModel,
    pub opt: Sgd,
    pub step: usize,
    pub total_steps: usize,
    aug_rng: ChaCha8Rng,
}

pub struct StepResult {
    pub loss: f64,
    pub lr: f64,
    pub components: BTreeMap<String, f64>,
}

impl<'a> Pretrainer<'a> {
    pub fn new(cfg: &'a RunConfig, total_steps: usize) -> Result<Self> {
        Ok(Self {
            cfg,
            model: PretrainModel::new(cfg)?,
            opt: Sgd::new(cfg.optim.clone()),
            step: 0,
            total_steps,
            aug_rng: stream_rng(cfg.seed, AUG_STREAM),
        })
    }

    /// One optimizer step. A non-finite loss leaves the parameters untouched
    /// and returns `NonFiniteLoss`.
    pub fn train_step(&mut self, batch: &[&Volume]) -> Result<StepResult> {
        let o = &self.cfg.optim;
        let lr = poly_lr(o.lr, self.step, self.total_steps, o.poly_power);
        let pairs = make_pairs(self.cfg, batch, &mut self.aug_rng)?;
        let (loss, components) = pretrain_loss(self.cfg, &self.model, &pairs)?;
        let value = scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let grads = loss.backward()?;
        self.opt.step(&grads, &self.model.trainable, lr)?;
        if let Some(target) = &self.model.target {
            ema_update(target, &self.model.online, self.cfg.loss.ema_momentum)?;
        }
        self.step += 1;
        Ok(StepResult {
            loss: value,
            lr,
            components,
        })
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: "pretrain".into(),
            framework: self.cfg.framework.name().into(),
            step: self.step as u64,
            encoder: self.cfg.encoder.clone(),
        }
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<String> {
        let rel = format!("{CHECKPOINT_DIR}/{name}");
        save_checkpoint(&dir.join(&rel), &self.meta(), &self.model.trainable)?;
        Ok(rel)
    }
}

fn push_collapse(w: &mut RunWriter, step: usize, r: &CollapseReport) -> Result<BTreeMap<String, f64>> {
    let mut last = BTreeMap::new();
    for (name, value) in r.entries() {
        w.push(Record::Collapse {
            step,
            metric: name.to_string(),
            value,
        })?;
        last.insert(name.to_string(), value);
    }
    Ok(last)
}

/// Pre-train on the training split of `ds`, writing the run into `out_dir`.
pub fn pretrain_on(cfg: &RunConfig, ds: &Dataset, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    check_volumes(cfg, &ds.volumes)?;
    let (train, _, _) = split_dataset(&ds.volumes, cfg.split, cfg.split_seed)?;
    if train.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let per_epoch = steps_per_epoch(cfg, train.len());
    if per_epoch == 0 {
        return Err(Error::DegenerateBatch(format!(
            "{} training volumes cannot form a batch for {}",
            train.len(),
            cfg.framework.name()
        )));
    }
    let total = per_epoch * cfg.epochs;
    let mut w = RunWriter::create(out_dir, &cfg.to_toml()?)?;
    let mut t = Pretrainer::new(cfg, total)?;
    let mut order_rng = stream_rng(cfg.seed, ORDER_STREAM);
    let eval_set: Vec<&Volume> = train.iter().take(cfg.eval_volumes).collect();
    let can_eval = eval_set.len() >= 2;
    let mut collapse = BTreeMap::new();
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(cfg, train.len(), &mut order_rng) {
            let batch: Vec<&Volume> = idx.iter().map(|&i| &train[i]).collect();
            let start = Instant::now();
            let r = match t.train_step(&batch) {
                Ok(r) => r,
                Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteActivation(_))) => {
                    let path = t.save(out_dir, "last_good.ckpt")?;
                    w.push(Record::Checkpoint { step: t.step, path })?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let step = t.step - 1;
            last_loss = r.loss;
            w.push(Record::Step {
                step,
                epoch,
                lr: r.lr,
                loss: r.loss,
                components: r.components,
            })?;
            w.time(step, start.elapsed().as_secs_f64())?;
            if can_eval && cfg.eval_every > 0 && t.step % cfg.eval_every == 0 {
                collapse = push_collapse(&mut w, t.step, &collapse_eval(cfg, &t.model, &eval_set)?)?;
            }
            if cfg.checkpoint_every > 0 && t.step % cfg.checkpoint_every == 0 && t.step < total {
                let path = t.save(out_dir, &format!("step_{:06}.ckpt", t.step))?;
                w.push(Record::Checkpoint { step: t.step, path })?;
            }
        }
    }
    if can_eval && (cfg.eval_every == 0 || t.step % cfg.eval_every != 0) {
        collapse = push_collapse(&mut w, t.step, &collapse_eval(cfg, &t.model, &eval_set)?)?;
    }
    let checkpoint = t.save(out_dir, "final.ckpt")?;
    w.push(Record::Checkpoint {
        step: t.step,
        path: checkpoint.clone(),
    })?;
    w.finish(Summary {
        run_id: cfg.run_id.clone(),
        mode: "pretrain".into(),
        framework: cfg.framework.name().into(),
        steps: t.step,
        final_loss: last_loss,
        collapse,
        classes: Vec::new(),
        mean_dice: None,
        labeled_fraction: None,
        n_labeled: None,
        init_checkpoint: None,
        checkpoint,
    })
}
