//! Bias-corrected Adam over a named parameter store.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamStore;
use crate::{Error, Result};

pub type Gradients = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every non-frozen parameter that has a gradient. Nothing
    /// is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, frozen: &BTreeSet<String>) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            match params.get(name) {
                Some(p) if p.len() == g.len() => {}
                Some(p) => return Err(Error::shape("adam", p.shape(), &[g.len()])),
                None => return Err(Error::UnknownParameter(name.clone())),
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (name, g) in grads {
            if frozen.contains(name) {
                continue;
            }
            let p = params.get_mut(name).expect("checked above").data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    libm::sqrt(grads.values().flatten().map(|g| g * g).sum())
}

/// Scales all gradients so their global norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    n
}
