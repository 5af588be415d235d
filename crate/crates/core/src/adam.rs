//! Adam with bias correction and coupled L2 weight decay.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::ParamSet;
use crate::real::{self, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Moments of one parameter tensor. Each tensor keeps its own step count so
/// that tensors skipped in a step keep a correct bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Optimizer state aligned with one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    slots: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let slots = params
            .iter()
            .map(|p| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                t: 0,
            })
            .collect();
        Self { config, slots }
    }

    pub fn moments(&self) -> &[Moments] {
        &self.slots
    }

    /// Drops all accumulated moments.
    pub fn reset(&mut self) {
        for s in &mut self.slots {
            s.m.data_mut().iter_mut().for_each(|x| *x = 0.0);
            s.v.data_mut().iter_mut().for_each(|x| *x = 0.0);
            s.t = 0;
        }
    }

    /// One update of every tensor whose gradient is present. Tensors with a
    /// `None` gradient are left untouched, moments included.
    ///
    /// Non-finite gradients abort the whole step before anything is written.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.slots.len() != params.len() {
            return Err(Error::Config(format!(
                "adam: {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.slots.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("adam", p.value.shape(), g.shape()));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        let c = self.config;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let Some(g) = g else { continue };
            slot.t += 1;
            let t = slot.t as i32;
            let bc1 = 1.0 - powi(c.beta1, t);
            let bc2 = 1.0 - powi(c.beta2, t);
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            let w = p.value.data_mut();
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i] + decay * w[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= c.lr * m_hat / (real::sqrt(v_hat) + c.eps);
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite(p.name.to_string()));
            }
        }
        Ok(())
    }
}

fn powi(x: Real, n: i32) -> Real {
    (0..n).fold(1.0, |acc, _| acc * x)
}
