//! AdamW with decoupled weight decay over a [`ParamStore`].
//!
//! Moments are kept per parameter name and rounded to the parameter dtype
//! after every update, so a checkpoint stored in that dtype restores the
//! optimizer exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    trainable: Vec<String>,
    state: BTreeMap<String, Moments>,
    steps: u64,
}

fn round_to(dtype: DType, x: f64) -> f64 {
    match dtype {
        DType::F32 => x as f32 as f64,
        _ => x,
    }
}

impl AdamW {
    /// Optimizes the named parameters only; everything else is left untouched.
    pub fn new(trainable: impl IntoIterator<Item = String>, cfg: AdamWConfig) -> Self {
        Self { cfg, trainable: trainable.into_iter().collect(), state: BTreeMap::new(), steps: 0 }
    }

    pub fn for_prefix(params: &ParamStore, prefix: &str, cfg: AdamWConfig) -> Self {
        Self::new(params.names().filter(|n| n.starts_with(prefix)).cloned(), cfg)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn trainable(&self) -> &[String] {
        &self.trainable
    }

    /// Applies one update at learning rate `lr`. Parameters without a gradient
    /// in `grads` are skipped. Weight decay applies to `*.weight` matrices.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let dtype = params.dtype();
        for name in &self.trainable {
            let var = params.get(name)?;
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let mut p = params.values(name)?;
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            let decay = if name.ends_with(".weight") { c.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                st.m[i] = round_to(dtype, c.beta1 * st.m[i] + (1.0 - c.beta1) * g[i]);
                st.v[i] = round_to(dtype, c.beta2 * st.v[i] + (1.0 - c.beta2) * g[i] * g[i]);
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                p[i] -= lr * (decay * p[i] + mhat / (vhat.sqrt() + c.eps));
            }
            var.set(&Tensor::from_vec(p, var.shape(), &Device::Cpu)?.to_dtype(dtype)?)?;
        }
        Ok(())
    }

    /// Moment tensors named `m.<param>` and `v.<param>`.
    pub fn state_tensors(&self, params: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, st) in &self.state {
            let shape = params.get(name)?.shape().clone();
            for (tag, vals) in [("m", &st.m), ("v", &st.v)] {
                let t = Tensor::from_vec(vals.clone(), &shape, &Device::Cpu)?.to_dtype(params.dtype())?;
                out.insert(format!("{tag}.{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, steps: u64) -> Result<()> {
        self.state.clear();
        for name in &self.trainable {
            let (Some(m), Some(v)) = (tensors.get(&format!("m.{name}")), tensors.get(&format!("v.{name}"))) else {
                continue;
            };
            let flat = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
            let st = Moments { m: flat(m)?, v: flat(v)? };
            if st.m.len() != st.v.len() {
                return Err(Error::IncompatibleCheckpoint(format!("moment sizes differ for `{name}`")));
            }
            self.state.insert(name.clone(), st);
        }
        self.steps = steps;
        Ok(())
    }
}
