//! Quasi-hyperbolic Adam.
//!
//! ```text
//! m ← β₁ m + (1 − β₁) g        v ← β₂ v + (1 − β₂) g²
//! m̂ = m / (1 − β₁ᵗ)            v̂ = v / (1 − β₂ᵗ)
//! θ ← θ − lr · ((1 − ν₁) g + ν₁ m̂) / (√((1 − ν₂) g² + ν₂ v̂) + ε)
//! ```
//!
//! `ν₁ = ν₂ = 1` is Adam.

use serde::{Deserialize, Serialize};

use crate::error::{NodeError, Result};
use crate::tensor::{Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QhAdamConfig {
    pub nu1: f64,
    pub nu2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for QhAdamConfig {
    fn default() -> Self {
        QhAdamConfig {
            nu1: 0.7,
            nu2: 1.0,
            beta1: 0.995,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl QhAdamConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [("nu1", self.nu1), ("nu2", self.nu2)] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("qhadam.{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                errs.push(format!("qhadam.{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.eps > 0.0) {
            errs.push(format!("qhadam.eps must be positive, got {}", self.eps));
        }
        errs
    }
}

#[derive(Clone, Debug)]
pub struct QhAdam {
    pub config: QhAdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl QhAdam {
    /// Zero moment buffers shaped like `params`.
    pub fn new<'a>(config: QhAdamConfig, params: impl IntoIterator<Item = &'a Parameter>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            .unzip();
        QhAdam { config, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the populated `grad` fields. All gradients
    /// are checked before any parameter moves.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) -> Result<()> {
        let mut params: Vec<&mut Parameter> = params.into_iter().collect();
        if params.len() != self.m.len() {
            return Err(NodeError::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(NodeError::NanGradient(p.name.clone()));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let theta = p.value.data_mut();
            for (((th, &gi), mi), vi) in theta.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let num = (1.0 - c.nu1) * gi + c.nu1 * mhat;
                let den = ((1.0 - c.nu2) * gi * gi + c.nu2 * vhat).sqrt() + c.eps;
                *th -= lr * num / den;
            }
        }
        Ok(())
    }
}
