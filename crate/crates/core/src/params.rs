//! Named parameter tensors and the small set of layers built from them.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Learnable tensors keyed by canonical dotted names.
#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    dtype: DType,
}

pub type EncoderState = ParamStore;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-b, b)`.
    Uniform(f64),
    Normal(f64),
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?.contiguous()?)?;
        self.params.insert(name.into(), var);
        Ok(())
    }

    /// Draw a fresh tensor; draws happen in call order, so the construction
    /// sequence fixes the initial values for a given stream.
    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        self.insert(name, Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::KeyMismatch(format!("no parameter named `{name}`")))
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.params
            .get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.var(name)?;
        if var.dims() != value.dims() {
            return Err(Error::ShapeMismatch(format!(
                "`{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Independent copy with fresh variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for (k, v) in &self.params {
            out.insert(k.clone(), v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    /// Copy of the parameters whose names start with `prefix.`, with the
    /// prefix replaced by `new_prefix` (or stripped when empty).
    pub fn extract(&self, prefix: &str, new_prefix: &str) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        let lead = format!("{prefix}.");
        for (k, v) in &self.params {
            if let Some(rest) = k.strip_prefix(&lead) {
                let name = if new_prefix.is_empty() {
                    rest.to_string()
                } else {
                    format!("{new_prefix}.{rest}")
                };
                out.insert(name, v.as_tensor().copy()?)?;
            }
        }
        Ok(out)
    }

    /// Move all parameters of `other` into `self`, failing on name clashes.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.params {
            if self.params.contains_key(&k) {
                return Err(Error::KeyMismatch(format!("duplicate parameter `{k}`")));
            }
            self.insert(k, v.as_tensor().clone())?;
        }
        Ok(())
    }

    /// A store holding the very same variables as `stores`: updates made
    /// through either handle are visible to both.
    pub fn shared_union(stores: &[&ParamStore]) -> Result<Self> {
        let dtype = stores.first().map_or(DType::F64, |s| s.dtype);
        let mut out = Self::new(dtype);
        for s in stores {
            for (k, v) in &s.params {
                if out.params.insert(k.clone(), v.clone()).is_some() {
                    return Err(Error::KeyMismatch(format!("duplicate parameter `{k}`")));
                }
            }
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype);
        for (k, v) in &self.params {
            out.insert(k.clone(), v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    /// Flat values of one parameter as f64.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .get(name)?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    pub fn set_values(&self, name: &str, values: Vec<f64>) -> Result<()> {
        let shape = self.get(name)?.dims().to_vec();
        self.set(name, &Tensor::from_vec(values, shape, &Device::Cpu)?)
    }

    /// Fail unless `self` and `other` hold the same names with equal shapes.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::KeyMismatch(format!(
                "{} parameters vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (k, v) in &self.params {
            let o = other
                .params
                .get(k)
                .ok_or_else(|| Error::KeyMismatch(format!("`{k}` missing from the other store")))?;
            if v.dims() != o.dims() {
                return Err(Error::KeyMismatch(format!(
                    "`{k}`: {:?} vs {:?}",
                    v.dims(),
                    o.dims()
                )));
            }
        }
        Ok(())
    }
}

/// `target ← m · target + (1 − m) · online` for every parameter.
pub fn ema_update(target: &ParamStore, online: &ParamStore, momentum: f64) -> Result<()> {
    target.check_same_layout(online)?;
    for (k, t) in target.iter() {
        let o = online.get(k)?.detach();
        let next = ((t.as_tensor() * momentum)? + (o * (1.0 - momentum))?)?;
        t.set(&next)?;
    }
    Ok(())
}

/// `x · W + b` over the last axis; weights are stored `(in, out)`.
pub fn linear(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    let dims = x.dims().to_vec();
    let (fan_in, fan_out) = w.dims2()?;
    let rows = x.elem_count() / fan_in;
    let y = x.reshape((rows, fan_in))?.matmul(w)?.broadcast_add(b)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = fan_out;
    Ok(y.reshape(out_dims)?)
}

pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.init(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Uniform(bound), rng)?;
    store.init(format!("{prefix}.bias"), &[fan_out], Init::Zeros, rng)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let gamma = store.get(&format!("{prefix}.weight"))?;
    let beta = store.get(&format!("{prefix}.bias"))?;
    let mean = x.mean_keepdim(D::Minus1)?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centred.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.init(format!("{prefix}.weight"), &[dim], Init::Ones, rng)?;
    store.init(format!("{prefix}.bias"), &[dim], Init::Zeros, rng)
}

/// Tanh-approximated GELU written out in primitive ops so its gradient is
/// exact for the function actually evaluated.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = ((x + (x.powf(3.0)? * 0.044715)?)? * c)?;
    let gate = ((inner.tanh()? + 1.0)? * 0.5)?;
    Ok((x * gate)?)
}

/// Softmax over the last axis. The shift by the row maximum carries no
/// gradient (softmax is shift invariant).
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Row-wise unit normalization over the last axis.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

pub fn scalar_f64(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
