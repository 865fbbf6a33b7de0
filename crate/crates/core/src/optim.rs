//! Adam with bias correction, optional global-norm clipping, and the two
//! learning-rate schedules (step decay and cosine annealing).

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// `lr0 * factor^floor(t / every)`
    StepDecay { lr0: f64, every: u64, factor: f64 },
    /// `lr_min + (lr0 - lr_min)(1 + cos(pi t / total)) / 2`, held at `lr_min` past `total`.
    Cosine { lr0: f64, lr_min: f64, total: u64 },
}

impl Schedule {
    pub fn step_decay() -> Self {
        Schedule::StepDecay { lr0: 1e-4, every: 100_000, factor: 0.5 }
    }

    pub fn cosine(total: u64) -> Self {
        Schedule::Cosine { lr0: 2e-4, lr_min: 1e-6, total }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::StepDecay { lr0, every, factor } => lr0 > 0.0 && every > 0 && factor > 0.0 && factor <= 1.0,
            Schedule::Cosine { lr0, lr_min, total } => lr_min > 0.0 && lr0 >= lr_min && total > 0,
        };
        if !ok {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        match *self {
            Schedule::StepDecay { lr0, every, factor } => lr0 * factor.powi((t / every).min(i32::MAX as u64) as i32),
            Schedule::Cosine { lr0, lr_min, total } => {
                if t >= total {
                    return lr_min;
                }
                lr_min + (lr0 - lr_min) * (1.0 + (PI * t as f64 / total as f64).cos()) / 2.0
            }
        }
    }
}

/// Adam moments for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { beta1: BETA1, beta2: BETA2, eps: ADAM_EPS, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update. `names` label parameters in error messages.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam_step: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map_or("?", String::as_str);
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "adam_step: parameter `{name}` is {}, gradient {}",
                    p.shape(),
                    g.shape()
                )));
            }
            if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in parameter `{name}` at element {j}",
                    g.data()[j]
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = b1 * md[j] + (1.0 - b1) * gj;
                vd[j] = b2 * vd[j] + (1.0 - b2) * gj * gj;
                let mhat = md[j] / c1;
                let vhat = vd[j] / c2;
                pd[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
