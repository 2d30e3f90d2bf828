use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::models::ParamStore;

/// Adam with bias correction and moments that can be checkpointed.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let update = ((&m / c1)? / denom)?;
            let next = (var.as_tensor().detach() - (update * lr)?)?;
            var.set(&next)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }

    /// Moments keyed `m.<param>` / `v.<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let m = self.m.iter().map(|(k, t)| (format!("m.{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn load_state(&mut self, steps: u64, tensors: &BTreeMap<String, Tensor>, params: &ParamStore) -> Result<()> {
        self.t = steps;
        self.m.clear();
        self.v.clear();
        for (key, t) in tensors {
            let (slot, name) = match key.split_once('.') {
                Some(("m", name)) => (&mut self.m, name),
                Some(("v", name)) => (&mut self.v, name),
                _ => return Err(Error::Checkpoint(format!("unexpected optimizer tensor {key}"))),
            };
            let var = params
                .vars()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            if var.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state {key} has shape {:?}, parameter has {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            slot.insert(name.to_string(), t.to_dtype(params.dtype())?);
        }
        Ok(())
    }
}
