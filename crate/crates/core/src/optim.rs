//! Adam over the named trainable variables of a store, with state that can be saved and restored.

use std::collections::HashMap;

use tch::{nn, Tensor};

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Tracks every variable of `vs` that requires gradients, in name order.
    pub fn new(vs: &nn::VarStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().filter(|(_, t)| t.requires_grad()).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        let (names, params): (Vec<String>, Vec<Tensor>) = vars.into_iter().unzip();
        let m = params.iter().map(|p| p.zeros_like()).collect();
        let v = params.iter().map(|p| p.zeros_like()).collect();
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, names, params, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Differentiates `loss` with respect to the tracked parameters and applies one update.
    pub fn minimize(&mut self, loss: &Tensor) -> Result<()> {
        let refs: Vec<&Tensor> = self.params.iter().collect();
        let grads = Tensor::f_run_backward(&[loss], &refs, false, false)?;
        self.apply(&grads)
    }

    /// One update from explicit gradients; undefined gradients count as zero.
    pub fn apply(&mut self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), self.params.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        tch::no_grad(|| {
            for (i, g) in grads.iter().enumerate() {
                let g = if g.defined() { g.shallow_clone() } else { self.params[i].zeros_like() };
                let m = &mut self.m[i];
                let _ = m.g_mul_scalar_(self.beta1).g_add_(&(&g * (1.0 - self.beta1)));
                let v = &mut self.v[i];
                let _ = v.g_mul_scalar_(self.beta2).g_add_(&(g.square() * (1.0 - self.beta2)));
                let update = (&self.m[i] / bc1) / ((&self.v[i] / bc2).sqrt() + self.eps) * self.lr;
                let _ = self.params[i].g_sub_(&update);
            }
        });
        Ok(())
    }

    /// Moment tensors named `<prefix>m/<param>` and `<prefix>v/<param>`, plus the step counter.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.names.len() + 1);
        for (i, name) in self.names.iter().enumerate() {
            out.push((format!("{prefix}m/{name}"), self.m[i].shallow_clone()));
            out.push((format!("{prefix}v/{name}"), self.v[i].shallow_clone()));
        }
        out.push((format!("{prefix}step"), Tensor::from_slice(&[self.step as i64])));
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let get = |key: String| {
            tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("optimizer state `{key}` is missing")))
        };
        tch::no_grad(|| -> Result<()> {
            for (i, name) in self.names.iter().enumerate() {
                for (slot, store) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                    let src = get(format!("{prefix}{slot}/{name}"))?;
                    if src.size() != store.size() {
                        return Err(Error::Checkpoint(format!("optimizer state for `{name}` has the wrong shape")));
                    }
                    store.copy_(src);
                }
            }
            Ok(())
        })?;
        self.step = get(format!("{prefix}step"))?.int64_value(&[0]) as u64;
        Ok(())
    }
}
