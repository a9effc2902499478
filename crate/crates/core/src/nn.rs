//! Small neural building blocks on top of candle: a seeded parameter store,
//! linear layers, layer norm, multi-head attention and sinusoidal encodings.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::Path;

use candle::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Additive bias applied to masked attention logits; `exp` of it is exactly 0.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    /// Uniform(±sqrt(6 / (fan_in + fan_out))).
    Xavier { fan_in: usize, fan_out: usize },
}

/// Named trainable parameters.
///
/// Each parameter is initialized from its own RNG stream derived from the
/// store seed and the parameter name, so adding or removing a parameter never
/// changes how the others are initialized.
#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed,
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// RNG stream owned by parameter `name`.
    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(a) => {
                let mut rng = self.rng_for(name);
                (0..n).map(|_| rng.random_range(-a..=a)).collect()
            }
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = self.rng_for(name);
                (0..n).map(|_| rng.random_range(-a..=a)).collect()
            }
        };
        self.param_from(name, Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn param_from(&mut self, name: &str, value: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Invalid(format!("parameter `{name}` defined twice")));
        }
        let var = Var::from_tensor(&value.to_dtype(DType::F64)?.to_device(&self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Overwrite a parameter in place; every layer holding it sees the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        var.set(&value.to_dtype(DType::F64)?)?;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_map(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        candle::safetensors::save(&self.to_map(), path.as_ref())?;
        Ok(())
    }

    /// Load values saved by [`save`](Self::save) into the existing parameters.
    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensors = candle::safetensors::load(path.as_ref(), &self.device)?;
        self.load_map(&tensors)
    }

    pub fn load_map(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F64)?)?;
        }
        if tensors.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {} parameters",
                tensors.len(),
                self.vars.len()
            )));
        }
        Ok(())
    }
}

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[fan_in, fan_out], Init::Xavier { fan_in, fan_out })?;
        let bias = store.param(&format!("{name}.bias"), &[fan_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (rows, fan_in) = (dims[..dims.len() - 1].iter().product::<usize>(), dims[dims.len() - 1]);
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank ≥ 1") = self.weight.dims()[1];
        let y = x.contiguous()?.reshape((rows, fan_in))?.matmul(&self.weight)?.reshape(out_dims)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: store.param(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Stack of linear layers with GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.gelu()?;
            }
        }
        Ok(h)
    }
}

/// Attention output plus the per-head weights `B×heads×Nq×Nk`.
pub struct AttentionOutput {
    pub output: Tensor,
    pub weights: Tensor,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim)?,
            heads,
            dim,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query: B×Nq×C`, `context: B×Nk×C`, `key_mask: B×Nk` (1 = attend).
    pub fn forward_with_weights(
        &self,
        query: &Tensor,
        context: &Tensor,
        key_mask: Option<&Tensor>,
    ) -> Result<AttentionOutput> {
        let (b, nq, c) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(mask) = key_mask {
            let nk = mask.dims()[1];
            let bias = mask.affine(-MASK_BIAS, MASK_BIAS)?.reshape((b, 1, 1, nk))?;
            scores = scores.broadcast_add(&bias)?;
        }
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, c))?;
        Ok(AttentionOutput {
            output: self.out.forward(&mixed)?,
            weights,
        })
    }

    pub fn forward(&self, query: &Tensor, context: &Tensor, key_mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, context, key_mask)?.output)
    }
}

/// Sinusoidal encoding of scalar positions: `n × dim`, interleaved sin/cos.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; positions.len() * dim];
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[r * dim + 2 * i] = (p * freq).sin();
            out[r * dim + 2 * i + 1] = (p * freq).cos();
        }
    }
    out
}

pub fn sinusoidal_tensor(positions: &[f64], dim: usize, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(sinusoidal(positions, dim), (positions.len(), dim), device)?)
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit_f64(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse sigmoid on a tensor, clamped away from 0 and 1.
pub fn logit(p: &Tensor) -> Result<Tensor> {
    let p = p.clamp(1e-6, 1.0 - 1e-6)?;
    Ok((p.log()? - p.affine(-1.0, 1.0)?.log()?)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, D::Minus1)?)
}
