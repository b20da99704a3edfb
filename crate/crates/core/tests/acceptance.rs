//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL` line to stdout (not captured by the harness).

mod common;

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_contrastive, dice_oracle, hd95_oracle, random_tokens, tokens_tensor};
use trot::augment::MAX_MASK_RATIO;
use trot::data::{generate_dataset, DatasetSpec, Volume};
use trot::encoder::TokenGrid;
use trot::metrics::{dice, hd95};
use trot::objectives::{
    byol_token_loss, init_head, token_contrastive_loss, weighted_token_contrastive_loss, Framework, TokenBatch,
};
use trot::params::{ema_update, scalar_f64, ParamStore};
use trot::spatial::{apply_to_grid, apply_to_tensor, restore_token_grid, valid_transforms, SpatialTransform};
use trot::training::pretrain::{make_pairs, PretrainModel};
use trot::training::{finetune_on, pretrain_loss, pretrain_on, OptimConfig, RunConfig, Sgd};
use trot::Error;

fn verdict(n: u32, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n}: {status} ({detail})");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap().into_iter().map(f64::to_bits).collect()
}

#[test]
fn criterion_01_group_exactness() {
    let start = Instant::now();
    let all = SpatialTransform::all();
    let mut failures = Vec::new();

    let unique: std::collections::HashSet<_> = all.iter().collect();
    if all.len() != 48 || unique.len() != 48 {
        failures.push("group does not have 48 distinct elements".to_string());
    }

    // Closure and inverses, checked against sequential reindexing of a
    // coordinate-coded 3x3x3 grid.
    let shape = [3, 3, 3];
    let coords: Vec<u32> = (0..27).collect();
    for a in &all {
        let inv = a.inverse();
        if !a.compose(&inv).is_identity() || !inv.compose(a).is_identity() {
            failures.push(format!("inverse of {a}"));
        }
        let matches: Vec<_> = all.iter().filter(|u| u.compose(a).is_identity()).collect();
        if matches.len() != 1 || *matches[0] != inv {
            failures.push(format!("inverse of {a} is not unique"));
        }
        for b in &all {
            let c = a.compose(b);
            if !unique.contains(&c) {
                failures.push(format!("{a} after {b} leaves the group"));
            }
            let seq = apply_to_grid(&apply_to_grid(&coords, 1, shape, b).unwrap(), 1, shape, a).unwrap();
            if seq != apply_to_grid(&coords, 1, shape, &c).unwrap() {
                failures.push(format!("compose({a}, {b}) disagrees with sequential application"));
            }
        }
    }

    // Restore after apply on random token grids of every shape class.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for grid in [[4, 4, 4], [2, 4, 4], [2, 3, 4]] {
        let valid: Vec<_> = all.iter().filter(|t| t.preserves_shape(grid)).collect();
        for _ in 0..100 {
            let n = grid.iter().product::<usize>() * 3;
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(data, (1, grid[0], grid[1], grid[2], 3), &Device::Cpu).unwrap();
            for t in &valid {
                let moved = TokenGrid {
                    features: apply_to_tensor(&x, 1, t).unwrap(),
                    stage: 0,
                };
                let back = restore_token_grid(&moved, t).unwrap();
                if bits(&back.features) != bits(&x) {
                    failures.push(format!("restore(apply(g, {t})) != g on {grid:?}"));
                }
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(10);
    verdict(
        1,
        pass,
        &format!("{checked} restores, {} failures, {:.2}s", failures.len(), elapsed.as_secs_f64()),
    );
    assert!(pass, "{failures:?} in {elapsed:?}");
}

/// Per-patch mean of a channel-major volume.
fn pool(v: &Volume, patch: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = v.shape;
    let g = [d / patch[0], h / patch[1], w / patch[2]];
    let n = v.n_voxels();
    let count = (patch[0] * patch[1] * patch[2]) as f64;
    let mut out = Vec::new();
    for c in 0..v.channels {
        for a in 0..g[0] {
            for b in 0..g[1] {
                for e in 0..g[2] {
                    let mut s = 0.0;
                    for i in 0..patch[0] {
                        for j in 0..patch[1] {
                            for k in 0..patch[2] {
                                let idx = v.index([a * patch[0] + i, b * patch[1] + j, e * patch[2] + k]);
                                s += v.intensities[c * n + idx];
                            }
                        }
                    }
                    out.push(s / count);
                }
            }
        }
    }
    out
}

#[test]
fn criterion_02_partition_commutes_with_transforms() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = [([8, 8, 8], [2, 2, 2]), ([4, 8, 8], [1, 2, 2]), ([8, 8, 8], [1, 2, 4])];
    let mut failures = 0;
    let mut checked = 0;
    for i in 0..100 {
        let (shape, patch) = cases[i % cases.len()];
        let mut v = Volume::zeros(2, shape);
        // Multiples of 1/256: every patch sum is exact in any order.
        v.intensities.iter_mut().for_each(|x| *x = rng.random_range(0..256) as f64 / 256.0);
        let grid = [shape[0] / patch[0], shape[1] / patch[1], shape[2] / patch[2]];
        let pooled = pool(&v, patch);
        for t in valid_transforms(shape, &[patch]) {
            let lhs = pool(&trot::spatial::apply_to_volume(&v, &t).unwrap(), patch);
            let rhs = apply_to_grid(&pooled, 2, grid, &t).unwrap();
            failures += (lhs != rhs) as usize;
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(10);
    verdict(
        2,
        pass,
        &format!("{checked} volume/transform pairs, {failures} mismatches, {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_03_loss_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * b.abs() + 1e-12;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..100 {
        let b = rng.random_range(1..=4);
        let m = rng.random_range(1..=64);
        let p = rng.random_range(2..=16);
        let tau = rng.random_range(0.1..1.0);
        let w = rng.random_range(0.0..10.0);
        let sym = rng.random_bool(0.5);
        let z = random_tokens(&mut rng, b, m, p);
        let tb = TokenBatch::from_normalized(tokens_tensor(&z)).unwrap();
        let plain = scalar_f64(&token_contrastive_loss(&tb, tau, sym).unwrap()).unwrap();
        let weighted = scalar_f64(&weighted_token_contrastive_loss(&tb, tau, w, sym).unwrap()).unwrap();
        let weighted_w1 = scalar_f64(&weighted_token_contrastive_loss(&tb, tau, 1.0, sym).unwrap()).unwrap();
        let oracle_plain = brute_contrastive(&z, tau, 1.0, sym);
        let oracle_weighted = brute_contrastive(&z, tau, w, sym);
        for (got, want) in [(plain, oracle_plain), (weighted, oracle_weighted), (weighted_w1, plain)] {
            // A single token per batch gives a loss of exactly zero.
            if want.abs() > 1e-9 {
                worst = worst.max((got - want).abs() / want.abs());
            }
            failures += !close(got, want) as usize;
        }
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(60);
    verdict(
        3,
        pass,
        &format!("100 batches, worst relative error {worst:.1e}, {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

/// Largest relative disagreement between analytic and central-difference
/// derivatives over the sampled coordinates. `set(i, v)` writes coordinate
/// `i`, `loss()` evaluates the objective.
fn finite_difference_check(
    analytic: &[f64],
    coords: &[usize],
    value: impl Fn(usize) -> f64,
    set: impl Fn(usize, f64),
    loss: impl Fn() -> f64,
) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &i in coords {
        let x = value(i);
        set(i, x + h);
        let up = loss();
        set(i, x - h);
        let down = loss();
        set(i, x);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Gradient check of a scalar function of one tensor input.
fn check_input_gradient(shape: &[usize], init: Vec<f64>, f: impl Fn(&Tensor) -> Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let var = Var::from_vec(init.clone(), shape, &Device::Cpu).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let coords = sample(rng, init.len(), 60.min(init.len())).into_vec();
    let x = std::cell::RefCell::new(init);
    finite_difference_check(
        &g,
        &coords,
        |i| x.borrow()[i],
        |i, v| x.borrow_mut()[i] = v,
        || {
            let t = Tensor::from_vec(x.borrow().clone(), shape, &Device::Cpu).unwrap();
            scalar_f64(&f(&t)).unwrap()
        },
    )
}

/// Flat `(name, index)` list of every scalar in `store`.
fn scalar_coords(store: &ParamStore) -> Vec<(String, usize)> {
    store
        .iter()
        .flat_map(|(name, var)| (0..var.elem_count()).map(move |i| (name.clone(), i)))
        .collect()
}

/// Gradient check of a scalar function of the parameters in `store`.
fn check_param_gradient(store: &ParamStore, f: impl Fn() -> Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let grads = f().backward().unwrap();
    let all = scalar_coords(store);
    let coords = sample(rng, all.len(), 60).into_vec();
    let analytic: Vec<f64> = all
        .iter()
        .map(|(name, i)| match grads.get(store.var(name).unwrap().as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[*i],
            None => 0.0,
        })
        .collect();
    finite_difference_check(
        &analytic,
        &coords,
        |k| store.values(&all[k].0).unwrap()[all[k].1],
        |k, v| {
            let (name, i) = &all[k];
            let mut vals = store.values(name).unwrap();
            vals[*i] = v;
            store.set_values(name, vals).unwrap();
        },
        || scalar_f64(&f()).unwrap(),
    )
}

fn tiny_run(framework: Framework) -> RunConfig {
    let mut cfg = RunConfig {
        framework,
        encoder: common::tiny_encoder(),
        ..Default::default()
    };
    cfg.loss.proj_dim = 8;
    cfg.augment.mask_ratio = 0.5;
    cfg
}

fn tiny_volumes(n: usize, seed: u64) -> Vec<Volume> {
    let spec = DatasetSpec {
        n_volumes: n,
        shape: [8, 8, 8],
        seed,
        ..Default::default()
    };
    generate_dataset(&spec).unwrap().volumes
}

#[test]
fn criterion_04_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, m, p) = (2, 8, 6);
    let n = b * m * p;
    let init: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let views = |x: &Tensor| {
        let x = x.reshape((2, b, m, p)).unwrap();
        TokenBatch::from_views(&x.get(0).unwrap(), &x.get(1).unwrap()).unwrap()
    };
    let plain = check_input_gradient(
        &[2 * n],
        init.clone(),
        |x| token_contrastive_loss(&views(x), 0.5, true).unwrap(),
        &mut rng,
    );
    let weighted = check_input_gradient(
        &[2 * n],
        init,
        |x| weighted_token_contrastive_loss(&views(x), 0.5, 5.0, true).unwrap(),
        &mut rng,
    );

    // BYOL: gradients with respect to the online heads.
    let mut heads = ParamStore::new(DType::F64);
    let mut hrng = ChaCha8Rng::seed_from_u64(40);
    init_head(&mut heads, "proj", 4, 6, &mut hrng).unwrap();
    init_head(&mut heads, "pred", 6, 6, &mut hrng).unwrap();
    let target_heads = heads.extract("proj", "proj").unwrap().deep_clone().unwrap();
    let grid = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..2 * 8 * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        TokenGrid {
            features: Tensor::from_vec(data, (2, 2, 2, 2, 4), &Device::Cpu).unwrap(),
            stage: 0,
        }
    };
    let (online, target) = (grid(41), grid(42));
    let byol = check_param_gradient(
        &heads,
        || byol_token_loss(&online, &target, &heads, &target_heads).unwrap(),
        &mut rng,
    );

    // Encoder, projection head and weighted loss end to end.
    let cfg = tiny_run(Framework::SimtrotW);
    let model = PretrainModel::new(&cfg).unwrap();
    let vols = tiny_volumes(2, 5);
    let refs: Vec<&Volume> = vols.iter().collect();
    let pairs = make_pairs(&cfg, &refs, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
    let e2e = check_param_gradient(
        &model.trainable,
        || pretrain_loss(&cfg, &model, &pairs).unwrap().0,
        &mut rng,
    );

    let elapsed = start.elapsed();
    let worst = [plain, weighted, byol, e2e];
    let pass = worst.iter().all(|&w| w <= 1e-4) && elapsed < Duration::from_secs(300);
    verdict(
        4,
        pass,
        &format!(
            "60 coordinates each, worst relative error plain {plain:.1e}, weighted {weighted:.1e}, byol {byol:.1e}, end-to-end {e2e:.1e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass, "{worst:?}");
}

#[test]
fn criterion_05_byol_stop_gradient_and_ema() {
    let cfg = tiny_run(Framework::Btrot);
    let model = PretrainModel::new(&cfg).unwrap();
    let target = model.target.as_ref().unwrap();
    let vols = tiny_volumes(2, 6);
    let refs: Vec<&Volume> = vols.iter().collect();
    let pairs = make_pairs(&cfg, &refs, &mut ChaCha8Rng::seed_from_u64(50)).unwrap();
    let (loss, _) = pretrain_loss(&cfg, &model, &pairs).unwrap();
    let grads = loss.backward().unwrap();
    let mut target_nonzero = 0;
    for (_, var) in target.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            target_nonzero += g.abs().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().filter(|&&x| x != 0.0).count();
        }
    }
    let online_has_grad = model.trainable.iter().filter(|(_, v)| grads.get(v.as_tensor()).is_some()).count();

    // The optimizer only ever holds state for online and predictor weights.
    let mut opt = Sgd::new(OptimConfig::pretrain_default());
    opt.step(&grads, &model.trainable, 1e-3).unwrap();
    let state: Vec<&String> = opt.state_names().collect();
    let trainable: Vec<&String> = model.trainable.names().collect();
    let state_ok = state == trainable;

    // EMA closed form after k steps towards a constant online branch.
    let (k, mom) = (5, 0.9);
    let mut r = ChaCha8Rng::seed_from_u64(51);
    let mut t0 = ParamStore::new(DType::F64);
    let mut on = ParamStore::new(DType::F64);
    init_head(&mut t0, "proj", 4, 4, &mut r).unwrap();
    init_head(&mut on, "proj", 4, 4, &mut r).unwrap();
    let tk = t0.deep_clone().unwrap();
    for _ in 0..k {
        ema_update(&tk, &on, mom).unwrap();
    }
    let mk = f64::powi(mom, k);
    let mut ema_err: f64 = 0.0;
    for name in t0.names() {
        let (a, b, c) = (t0.values(name).unwrap(), on.values(name).unwrap(), tk.values(name).unwrap());
        for i in 0..a.len() {
            ema_err = ema_err.max((mk * a[i] + (1.0 - mk) * b[i] - c[i]).abs());
        }
    }
    let pass = target_nonzero == 0 && online_has_grad > 0 && state_ok && ema_err <= 1e-9;
    verdict(
        5,
        pass,
        &format!(
            "{target_nonzero} non-zero target gradient entries, optimizer state matches trainables: {state_ok}, EMA error {ema_err:.1e}"
        ),
    );
    assert!(pass);
}

/// Toy pre-training protocol shared by the desk-scale experiments.
fn toy_pretrain(dataset: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        dataset: dataset.to_path_buf(),
        encoder: common::toy_encoder(),
        batch_size: 2,
        optim: OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            ..OptimConfig::pretrain_default()
        },
        ..Default::default()
    };
    cfg.augment.mask_ratio = 0.25;
    cfg
}

fn toy_dataset(n: usize) -> trot::data::Dataset {
    generate_dataset(&DatasetSpec {
        n_volumes: n,
        shape: [16, 16, 16],
        ..Default::default()
    })
    .unwrap()
}

fn cross_volume(out: &trot::training::RunOutcome) -> f64 {
    out.summary.collapse["cross_volume_same_position"]
}

#[test]
fn criterion_06_collapse_direction() {
    let start = Instant::now();
    let ds = toy_dataset(16);
    let root = tempfile::tempdir().unwrap();
    let base = toy_pretrain(root.path());
    // 13 training volumes, 7 batches per epoch: 43 epochs reach 301 steps.
    let epochs = 43;
    let run = |name: &str, cfg: RunConfig| {
        let dir = root.path().join(name);
        let out = pretrain_on(&cfg, &ds, &dir).unwrap();
        assert!(out.summary.steps >= 300);
        cross_volume(&out)
    };
    let (mut plain, mut rotated, mut w0, mut w5) = (vec![], vec![], vec![], vec![]);
    for seed in 0..3 {
        let mut cfg = RunConfig {
            seed,
            epochs,
            framework: Framework::Simtrot,
            ..base.clone()
        };
        cfg.augment.spatial = false;
        plain.push(run(&format!("plain-norot-{seed}"), cfg.clone()));
        cfg.augment.spatial = true;
        rotated.push(run(&format!("plain-rot-{seed}"), cfg.clone()));
        cfg.framework = Framework::SimtrotW;
        cfg.augment.spatial = false;
        cfg.loss.w = 0.0;
        w0.push(run(&format!("weighted-w0-{seed}"), cfg.clone()));
        cfg.loss.w = 5.0;
        w5.push(run(&format!("weighted-w5-{seed}"), cfg));
    }
    let (mp, mr, m0, m5) = (median(plain.clone()), median(rotated.clone()), median(w0.clone()), median(w5.clone()));
    let elapsed = start.elapsed();
    let pass = mp - mr >= 0.2 && m5 <= m0 && elapsed < Duration::from_secs(1800);
    verdict(
        6,
        pass,
        &format!(
            "median cross-volume cosine without rotation {mp:.3}, with rotation {mr:.3}; w=0 {m0:.3}, w=5 {m5:.3}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    );
    println!("per seed: plain {plain:?} rotated {rotated:?} w0 {w0:?} w5 {w5:?}");
    assert!(pass);
}

#[test]
fn criterion_07_limited_label_direction() {
    let start = Instant::now();
    let ds = toy_dataset(20);
    let root = tempfile::tempdir().unwrap();
    let mut base = toy_pretrain(root.path());
    base.framework = Framework::SimtrotW;
    // 10 training volumes (5 batches per epoch), 10 test volumes.
    base.split = [0.5, 0.0, 0.5];
    base.epochs = 60;
    base.finetune.optim = OptimConfig {
        lr: 0.05,
        momentum: 0.9,
        ..OptimConfig::finetune_default()
    };
    // About 300 fine-tuning steps at either label budget.
    let budgets = [(0.1, 300), (1.0, 60)];
    let mut dice_of = std::collections::BTreeMap::<(u64, bool), Vec<f64>>::new();
    for seed in 0..3u64 {
        let cfg = RunConfig { seed, ..base.clone() };
        let pre = pretrain_on(&cfg, &ds, &root.path().join(format!("pre-{seed}"))).unwrap();
        for (fraction, epochs) in budgets {
            for pretrained in [true, false] {
                let mut ft = cfg.clone();
                ft.finetune.labeled_fraction = fraction;
                ft.finetune.epochs = epochs;
                ft.finetune.init_checkpoint = pretrained.then(|| pre.final_checkpoint());
                let dir = root.path().join(format!("ft-{seed}-{fraction}-{pretrained}"));
                let out = finetune_on(&ft, &ds, &dir).unwrap();
                dice_of
                    .entry((fraction.to_bits(), pretrained))
                    .or_default()
                    .push(out.summary.mean_dice.unwrap());
            }
        }
    }
    let med = |f: f64, p: bool| median(dice_of[&(f.to_bits(), p)].clone());
    let (pre10, scr10, pre100, scr100) = (med(0.1, true), med(0.1, false), med(1.0, true), med(1.0, false));
    let gap10 = pre10 - scr10;
    let gap100 = pre100 - scr100;
    let elapsed = start.elapsed();
    let pass = pre10 >= scr10 - 0.01 && gap10 >= gap100 - 0.05 && elapsed < Duration::from_secs(7200);
    verdict(
        7,
        pass,
        &format!(
            "median Dice at 10%: pretrained {pre10:.3} vs scratch {scr10:.3}; at 100%: {pre100:.3} vs {scr100:.3}; gaps {gap10:+.3} / {gap100:+.3}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    );
    println!("per seed: {dice_of:?}");
    assert!(pass);
}

#[test]
fn criterion_08_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut dice_mismatch = 0;
    let mut worst_hd: f64 = 0.0;
    let mut inf_mismatch = 0;
    for case in 0..50 {
        let shape = [rng.random_range(3..10), rng.random_range(3..10), rng.random_range(3..10)];
        let spacing = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        let n: usize = shape.iter().product();
        let mut label = || -> Vec<u8> {
            match case % 5 {
                // Empty prediction or truth every so often.
                0 if rng.random_bool(0.5) => vec![0; n],
                1 => {
                    // A random box.
                    let lo: Vec<usize> = shape.iter().map(|&s| rng.random_range(0..s)).collect();
                    let hi: Vec<usize> = (0..3).map(|a| rng.random_range(lo[a]..shape[a]) + 1).collect();
                    (0..n)
                        .map(|i| {
                            let c = [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]];
                            (0..3).all(|a| (lo[a]..hi[a]).contains(&c[a])) as u8
                        })
                        .collect()
                }
                _ => (0..n).map(|_| rng.random_range(0..3)).collect(),
            }
        };
        let pred = label();
        let truth = label();
        for class in 1..3u8 {
            if dice(&pred, &truth, class).unwrap() != dice_oracle(&pred, &truth, class) {
                dice_mismatch += 1;
            }
            let p: Vec<bool> = pred.iter().map(|&c| c == class).collect();
            let t: Vec<bool> = truth.iter().map(|&c| c == class).collect();
            let got = hd95(&p, &t, shape, spacing).unwrap();
            let want = hd95_oracle(&p, &t, shape, spacing);
            if want.is_infinite() || got.is_infinite() {
                inf_mismatch += (got != want) as usize;
            } else {
                worst_hd = worst_hd.max((got - want).abs());
            }
        }
    }
    let pass = dice_mismatch == 0 && inf_mismatch == 0 && worst_hd <= 1e-9;
    verdict(
        8,
        pass,
        &format!("50 mask pairs x 2 classes, Dice mismatches {dice_mismatch}, worst HD95 error {worst_hd:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_determinism() {
    let ds = generate_dataset(&DatasetSpec {
        n_volumes: 6,
        shape: [8, 8, 8],
        ..Default::default()
    })
    .unwrap();
    let root = tempfile::tempdir().unwrap();
    let files = ["record.jsonl", "summary.json", "config.toml", "checkpoints/final.ckpt"];
    let mut identical = true;
    let mut compared = 0;
    for framework in [Framework::SimtrotW, Framework::Btrot] {
        let mut cfg = tiny_run(framework);
        cfg.epochs = 2;
        cfg.eval_every = 2;
        cfg.eval_volumes = 2;
        cfg.split = [0.5, 0.0, 0.5];
        cfg.finetune.epochs = 1;
        let a = root.path().join(format!("{}-a", framework.name()));
        let b = root.path().join(format!("{}-b", framework.name()));
        let pa = pretrain_on(&cfg, &ds, &a).unwrap();
        pretrain_on(&cfg, &ds, &b).unwrap();
        let mut ft = cfg.clone();
        ft.finetune.init_checkpoint = Some(pa.final_checkpoint());
        finetune_on(&ft, &ds, &a.join("ft")).unwrap();
        finetune_on(&ft, &ds, &b.join("ft")).unwrap();
        for sub in ["", "ft/"] {
            for f in files {
                let x = std::fs::read(a.join(format!("{sub}{f}"))).unwrap();
                let y = std::fs::read(b.join(format!("{sub}{f}"))).unwrap();
                identical &= x == y;
                compared += 1;
            }
        }
    }
    verdict(
        9,
        identical,
        &format!("{compared} run artifacts compared byte for byte across repeated runs"),
    );
    assert!(identical);
}

#[test]
fn criterion_10_config_guards_and_defaults() {
    let cfg = RunConfig::default();
    let defaults = cfg.loss.tau == 0.5 && cfg.loss.w == 5.0 && cfg.augment.mask_ratio == 0.75 && cfg.batch_size == 2;
    let mut too_high = cfg.clone();
    too_high.augment.mask_ratio = 0.86;
    let rejected = matches!(too_high.validate(), Err(Error::MaskRatioTooHigh(_)));
    let mut via_override = cfg.clone();
    let override_rejected = via_override
        .apply_override("augment.mask_ratio", "0.9")
        .and_then(|_| via_override.validate())
        .is_err();
    let mut limit = cfg.clone();
    limit.augment.mask_ratio = MAX_MASK_RATIO;
    let limit_ok = limit.validate().is_ok();
    let pass = defaults && rejected && override_rejected && limit_ok;
    verdict(
        10,
        pass,
        &format!(
            "defaults tau=0.5 w=5 mask_ratio=0.75 batch=2: {defaults}; 0.86 rejected: {rejected}; override 0.9 rejected: {override_rejected}; 0.85 accepted: {limit_ok}"
        ),
    );
    assert!(pass);
}
