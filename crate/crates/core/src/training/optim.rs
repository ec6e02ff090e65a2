use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state. Moment arrays are allocated lazily per parameter the
/// first time it receives a gradient, and `step` counts applied updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub adam: AdamConfig,
    pub step: u64,
    pub m: Vec<Option<Vec<T>>>,
    pub v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        Self {
            kind,
            adam: AdamConfig::default(),
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    pub fn adam(num_params: usize) -> Self {
        Self::new(OptimizerKind::Adam, num_params)
    }

    /// Applies one update with learning rate `lr` to every parameter that has
    /// a gradient. A non-finite gradient aborts the step before anything is
    /// modified.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let next = self.step + 1;
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    let id = params.iter().nth(i).map(|(_, e)| e.name.clone()).unwrap_or_default();
                    return Err(Error::NanGradient { param: id, step: next });
                }
            }
        }
        self.step = next;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let bc1 = 1.0 - beta1.powi(next.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(next.min(i32::MAX as u64) as i32);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let theta = params.tensor_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &gi) in theta.iter_mut().zip(g) {
                        *p = T::from_f64(p.to_f64() - lr * gi.to_f64());
                    }
                }
                OptimizerKind::Adam => {
                    let i = id.index();
                    let m = self.m[i].get_or_insert_with(|| vec![T::ZERO; g.len()]);
                    let v = self.v[i].get_or_insert_with(|| vec![T::ZERO; g.len()]);
                    for k in 0..g.len() {
                        let gk = g[k].to_f64();
                        let mk = beta1 * m[k].to_f64() + (1.0 - beta1) * gk;
                        let vk = beta2 * v[k].to_f64() + (1.0 - beta2) * gk * gk;
                        m[k] = T::from_f64(mk);
                        v[k] = T::from_f64(vk);
                        let m_hat = mk / bc1;
                        let v_hat = vk / bc2;
                        theta[k] = T::from_f64(theta[k].to_f64() - lr * m_hat / (v_hat.sqrt() + eps));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x.to_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x = T::from_f64(x.to_f64() * s);
            }
        }
    }
    norm
}
