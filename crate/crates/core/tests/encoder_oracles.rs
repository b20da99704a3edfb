mod common;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trot::encoder::{
    new_encoder_state, patch_merge, patch_partition, windowed_attention, Encoder, EncoderConfig, TokenGrid,
};
use trot::params::ParamStore;
use trot::spatial::{apply_to_tensor, SpatialTransform};

const TOL: f64 = 1e-10;

fn randomize(store: &ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let n = store.values(&name).unwrap().len();
        store
            .set_values(&name, (0..n).map(|_| rng.random_range(-0.5..0.5)).collect())
            .unwrap();
    }
}

fn random_grid(rng: &mut ChaCha8Rng, shape: [usize; 3], c: usize) -> TokenGrid {
    let n = shape.iter().product::<usize>() * c;
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    TokenGrid {
        features: Tensor::from_vec(data, (1, shape[0], shape[1], shape[2], c), &Device::Cpu).unwrap(),
        stage: 0,
    }
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Block {
    p: String,
    store: ParamStore,
    heads: usize,
}

impl Block {
    fn get(&self, name: &str) -> Vec<f64> {
        self.store.values(&format!("{}.{name}", self.p)).unwrap()
    }

    fn lin(&self, x: &[f64], name: &str) -> Vec<f64> {
        let w = self.get(&format!("{name}.weight"));
        let b = self.get(&format!("{name}.bias"));
        let out = b.len();
        (0..out)
            .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + o]).sum::<f64>())
            .collect()
    }

    fn ln(&self, x: &[f64], name: &str) -> Vec<f64> {
        let g = self.get(&format!("{name}.weight"));
        let b = self.get(&format!("{name}.bias"));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    }

    /// Pre-norm block where token `a` attends to token `b` iff `allowed(a, b)`.
    fn apply(&self, tokens: &[Vec<f64>], allowed: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
        let c = tokens[0].len();
        let hd = c / self.heads;
        let qkv: Vec<Vec<f64>> = tokens.iter().map(|t| self.lin(&self.ln(t, "norm1"), "attn.qkv")).collect();
        let mut out = Vec::new();
        for (a, token) in tokens.iter().enumerate() {
            let mut mixed = vec![0.0; c];
            for h in 0..self.heads {
                let peers: Vec<usize> = (0..tokens.len()).filter(|&b| allowed(a, b)).collect();
                let scores: Vec<f64> = peers
                    .iter()
                    .map(|&b| (0..hd).map(|e| qkv[a][h * hd + e] * qkv[b][c + h * hd + e]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
                for (&b, s) in peers.iter().zip(&scores) {
                    let p = (s - top).exp() / z;
                    for e in 0..hd {
                        mixed[h * hd + e] += p * qkv[b][2 * c + h * hd + e];
                    }
                }
            }
            let x: Vec<f64> = self.lin(&mixed, "attn.proj").iter().zip(token).map(|(u, v)| u + v).collect();
            let hidden: Vec<f64> = self
                .lin(&self.ln(&x, "norm2"), "mlp.fc1")
                .into_iter()
                .map(|v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh()))
                .collect();
            out.push(self.lin(&hidden, "mlp.fc2").iter().zip(&x).map(|(u, v)| u + v).collect());
        }
        out
    }
}

fn tiny_block(seed: u64) -> Block {
    let cfg = common::tiny_encoder();
    let store = new_encoder_state(&cfg, DType::F64, seed).unwrap();
    randomize(&store, &mut ChaCha8Rng::seed_from_u64(seed + 100));
    Block {
        p: "encoder.stages.0.blocks.0".into(),
        store,
        heads: cfg.n_heads,
    }
}

fn tokens_of(g: &TokenGrid) -> Vec<Vec<f64>> {
    let c = g.channels();
    flat(&g.features).chunks(c).map(<[f64]>::to_vec).collect()
}

fn coord(i: usize, n: usize) -> [usize; 3] {
    [i / (n * n), (i / n) % n, i % n]
}

#[test]
fn full_grid_window_is_dense_attention() {
    let block = tiny_block(1);
    let g = random_grid(&mut ChaCha8Rng::seed_from_u64(2), [2, 2, 2], 4);
    let got = windowed_attention(&g, &block.store, &block.p, block.heads, [2, 2, 2], [0; 3]).unwrap();
    let want: Vec<f64> = block.apply(&tokens_of(&g), |_, _| true).concat();
    assert!(max_diff(&flat(&got.features), &want) < TOL);
}

#[test]
fn windows_only_see_their_own_tokens() {
    let block = tiny_block(3);
    let g = random_grid(&mut ChaCha8Rng::seed_from_u64(4), [4, 4, 4], 4);
    let got = windowed_attention(&g, &block.store, &block.p, block.heads, [2, 2, 2], [0; 3]).unwrap();
    let same_window = |a: usize, b: usize| {
        let (ca, cb) = (coord(a, 4), coord(b, 4));
        (0..3).all(|k| ca[k] / 2 == cb[k] / 2)
    };
    let want: Vec<f64> = block.apply(&tokens_of(&g), same_window).concat();
    assert!(max_diff(&flat(&got.features), &want) < TOL);
}

#[test]
fn shifted_windows_never_attend_across_the_wrap() {
    let block = tiny_block(5);
    let g = random_grid(&mut ChaCha8Rng::seed_from_u64(6), [4, 4, 4], 4);
    let got = windowed_attention(&g, &block.store, &block.p, block.heads, [2, 2, 2], [1, 1, 1]).unwrap();
    // Windows tile the grid rolled by -1; two tokens interact when they share
    // a rolled window and are not separated by the wrap-around seam.
    let rolled = |c: [usize; 3]| c.map(|x| (x + 3) % 4);
    let allowed = |a: usize, b: usize| {
        let (ca, cb) = (coord(a, 4), coord(b, 4));
        let (ra, rb) = (rolled(ca), rolled(cb));
        (0..3).all(|k| ra[k] / 2 == rb[k] / 2 && ra[k] as i64 - rb[k] as i64 == ca[k] as i64 - cb[k] as i64)
    };
    let want: Vec<f64> = block.apply(&tokens_of(&g), allowed).concat();
    assert!(max_diff(&flat(&got.features), &want) < TOL);
}

#[test]
fn merge_concatenates_children_then_projects() {
    let cfg = common::tiny_encoder();
    let store = new_encoder_state(&cfg, DType::F64, 7).unwrap();
    randomize(&store, &mut ChaCha8Rng::seed_from_u64(8));
    let g = random_grid(&mut ChaCha8Rng::seed_from_u64(9), [4, 4, 4], 4);
    let merged = patch_merge(&g, &store, "encoder.stages.0.merge").unwrap();
    assert_eq!(merged.features.dims(), &[1, 2, 2, 2, 8]);
    assert_eq!(merged.stage, 1);
    let x = tokens_of(&g);
    let w = store.values("encoder.stages.0.merge.weight").unwrap();
    let b = store.values("encoder.stages.0.merge.bias").unwrap();
    let mut want = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                let mut children: Vec<f64> = Vec::new();
                for (dz, dy, dx) in (0..8).map(|c| (c / 4, (c / 2) % 2, c % 2)) {
                    children.extend(&x[((2 * i + dz) * 4 + 2 * j + dy) * 4 + 2 * k + dx]);
                }
                for o in 0..8 {
                    want.push(b[o] + children.iter().enumerate().map(|(r, v)| v * w[r * 8 + o]).sum::<f64>());
                }
            }
        }
    }
    assert!(max_diff(&flat(&merged.features), &want) < TOL);
}

#[test]
fn hierarchical_default_maps_32_cubed_to_4_cubed() {
    let cfg = EncoderConfig::hierarchical();
    let store = new_encoder_state(&cfg, DType::F64, 0).unwrap();
    let x = Tensor::rand(0.0f64, 1.0, (1, 1, 32, 32, 32), &Device::Cpu).unwrap();
    let out = Encoder::new(&cfg, &store, "encoder").forward(&x).unwrap();
    assert_eq!(out.tokens.features.dims(), &[1, 4, 4, 4, cfg.out_dim()]);
    assert_eq!(out.stages.len(), 3);
    assert_eq!(out.stages[0].features.dims(), &[1, 16, 16, 16, 16]);
}

#[test]
fn symmetric_patch_projection_commutes_with_the_group() {
    let cfg = common::tiny_encoder();
    let store = new_encoder_state(&cfg, DType::F64, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let per_output: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rows = store.values("encoder.patch_embed.weight").unwrap().len() / cfg.embed_dim;
    store
        .set_values("encoder.patch_embed.weight", (0..rows).flat_map(|_| per_output.clone()).collect())
        .unwrap();
    store
        .set_values("encoder.patch_embed.bias", (0..cfg.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let n = store.values("encoder.pos_embed").unwrap().len();
    store.set_values("encoder.pos_embed", vec![0.0; n]).unwrap();

    let x = Tensor::rand(0.0f64, 1.0, (2, 1, 8, 8, 8), &Device::Cpu).unwrap();
    let base = patch_partition(&x, &store, "encoder", &cfg).unwrap();
    for t in SpatialTransform::all() {
        let moved = apply_to_tensor(&x, 2, &t).unwrap();
        let lhs = patch_partition(&moved, &store, "encoder", &cfg).unwrap();
        let rhs = apply_to_tensor(&base.features, 1, &t).unwrap();
        assert!(max_diff(&flat(&lhs.features), &flat(&rhs)) < 1e-12, "{t}");
    }
}
