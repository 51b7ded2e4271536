use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter plus the update count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            params.iter().map(|(k, p)| (k.clone(), vec![0.0; p.data.len()])).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl AdamW {
    /// `p ← p − lr·wd·p`, then `p ← p − lr·m̂ / (√v̂ + ε)`.
    pub fn update(&self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, state: &mut AdamState) -> Result<()> {
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?;
            let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
                return Err(Error::InvalidArgument(format!("no optimiser state for `{name}`")));
            };
            if g.len() != p.data.len() || m.len() != p.data.len() || v.len() != p.data.len() {
                return Err(Error::shape("adam", &[p.data.len()], &[g.len(), m.len(), v.len()]));
            }
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= self.lr * self.weight_decay * p.data[i];
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
