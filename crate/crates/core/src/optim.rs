//! AdamW with decoupled weight decay and global-norm gradient clipping.
//!
//! Moment buffers are keyed by parameter name so they can be checkpointed
//! next to the parameters.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle::backprop::GradStore;
use candle::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// What one optimizer step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Parameters without a gradient (unused in this step) are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<StepInfo> {
        let present: Vec<(&String, &Var, &Tensor)> = store
            .iter()
            .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name, var, g)))
            .collect();
        let mut sq = 0.0;
        for (name, _, g) in &present {
            let s = g.sqr()?.sum_all()?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Err(Error::Invalid(format!("non-finite gradient for `{name}`")));
            }
            sq += s;
        }
        let grad_norm = sq.sqrt();
        let c = &self.config;
        let clipped = c.grad_clip > 0.0 && grad_norm > c.grad_clip;
        let scale = if clipped { c.grad_clip / grad_norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var, g) in present {
            let g = (g.detach() * scale)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor();
            let next = ((theta * (1.0 - c.lr * c.weight_decay))? - (update * c.lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(StepInfo { grad_norm, clipped })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (k, t) in &self.m {
            map.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            map.insert(format!("v.{k}"), t.clone());
        }
        map.insert("step".into(), Tensor::new(&[self.step as f64], &candle::Device::Cpu)?);
        candle::safetensors::save(&map, path.as_ref())?;
        Ok(())
    }

    pub fn load(config: AdamWConfig, path: impl AsRef<Path>, store: &ParamStore) -> Result<Self> {
        let map = candle::safetensors::load(path.as_ref(), store.device())?;
        let mut opt = Self::new(config);
        for (k, t) in map {
            if let Some(name) = k.strip_prefix("m.") {
                opt.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v.") {
                opt.v.insert(name.to_string(), t);
            } else if k == "step" {
                opt.step = t.to_vec1::<f64>()?[0] as u64;
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor `{k}`")));
            }
        }
        for name in opt.m.keys() {
            if store.get(name).is_none() {
                return Err(Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`")));
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle::Device;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new(0, &Device::Cpu);
        let x = store.param("x", &[3], Init::Uniform(2.0)).unwrap();
        let target = Tensor::new(&[0.5, -1.0, 2.0], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, grad_clip: 0.0, ..Default::default() });
        for _ in 0..600 {
            let loss = (&x - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&store, &loss.backward().unwrap()).unwrap();
        }
        let got = x.to_vec1::<f64>().unwrap();
        for (g, w) in got.iter().zip([0.5, -1.0, 2.0]) {
            assert!((g - w).abs() < 1e-3, "{got:?}");
        }
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut store = ParamStore::new(0, &Device::Cpu);
        let x = store.param("x", &[2], Init::Zeros).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, grad_clip: 0.0, ..Default::default() });
        let loss = x.affine(3.0, 0.0).unwrap().sum_all().unwrap();
        opt.step(&store, &loss.backward().unwrap()).unwrap();
        let got = x.to_vec1::<f64>().unwrap();
        assert!(got.iter().all(|v| (v + 0.1).abs() < 1e-6));
    }

    #[test]
    fn clipping_reports_the_raw_norm() {
        let mut store = ParamStore::new(0, &Device::Cpu);
        let x = store.param("x", &[2], Init::Zeros).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let loss = Tensor::new(&[3.0, 4.0], &Device::Cpu).unwrap().mul(&x).unwrap().sum_all().unwrap();
        let info = opt.step(&store, &loss.backward().unwrap()).unwrap();
        assert!((info.grad_norm - 5.0).abs() < 1e-12);
        assert!(info.clipped);
    }

    #[test]
    fn state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new(0, &Device::Cpu);
        let x = store.param("x", &[2], Init::Ones).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let loss = x.sqr().unwrap().sum_all().unwrap();
        opt.step(&store, &loss.backward().unwrap()).unwrap();
        let path = dir.path().join("optim.safetensors");
        opt.save(&path).unwrap();
        let back = AdamW::load(AdamWConfig::default(), &path, &store).unwrap();
        assert_eq!(back.steps(), 1);
        assert_eq!(back.m["x"].to_vec1::<f64>().unwrap(), opt.m["x"].to_vec1::<f64>().unwrap());
    }
}
