//! Gradient optimizers for the primary encoder and the momentum rule for
//! the key encoder.

use serde::{Deserialize, Serialize};

use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimizer state; SGD keeps none.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    kind: OptimizerKind,
    step: u64,
    moments: Option<(ParamSet<T>, ParamSet<T>)>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, params: &ParamSet<T>) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => Some((params.zeros_like(), params.zeros_like())),
        };
        Self {
            kind,
            step: 0,
            moments,
        }
    }

    pub(crate) fn from_parts(kind: OptimizerKind, step: u64, moments: Option<(ParamSet<T>, ParamSet<T>)>) -> Self {
        Self { kind, step, moments }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers (Adam only).
    pub fn moments(&self) -> Option<(&ParamSet<T>, &ParamSet<T>)> {
        self.moments.as_ref().map(|(m, v)| (m, v))
    }

    /// One update of `params` against `grads` with learning rate `eta`.
    ///
    /// SGD: `θ -= η g`. Adam: bias-corrected moments with
    /// `(β1, β2, ε) = (0.9, 0.999, 1e-8)`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, eta: f64) -> Result<()> {
        params.check_shape(grads)?;
        self.step += 1;
        match &mut self.moments {
            None => {
                let eta = T::of(eta);
                for (p, g) in params.tensors_mut().iter_mut().zip(grads.tensors()) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi = *pi - eta * *gi;
                    }
                }
            }
            Some((m, v)) => {
                params.check_shape(m)?;
                let t = self.step as i32;
                let bc1 = T::of(1.0 - ADAM_BETA1.powi(t));
                let bc2 = T::of(1.0 - ADAM_BETA2.powi(t));
                let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
                let (eta, eps) = (T::of(eta), T::of(ADAM_EPS));
                let one = T::one();
                let tensors = params.tensors_mut();
                let ms = m.tensors_mut();
                let vs = v.tensors_mut();
                for (((p, g), mt), vt) in tensors.iter_mut().zip(grads.tensors()).zip(ms.iter_mut()).zip(vs.iter_mut()) {
                    for i in 0..p.len() {
                        let gi = g[i];
                        mt[i] = b1 * mt[i] + (one - b1) * gi;
                        vt[i] = b2 * vt[i] + (one - b2) * gi * gi;
                        let m_hat = mt[i] / bc1;
                        let v_hat = vt[i] / bc2;
                        p[i] = p[i] - eta * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `θ_k <- m θ_k + (1 - m) θ_q`, element-wise.
pub fn momentum_update<T: Real>(theta_k: &mut ParamSet<T>, theta_q: &ParamSet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidConfig(format!("momentum {m} outside [0, 1]")));
    }
    theta_k.check_shape(theta_q)?;
    let (mt, rest) = (T::of(m), T::of(1.0 - m));
    for (k, q) in theta_k.tensors_mut().iter_mut().zip(theta_q.tensors()) {
        for (ki, qi) in k.iter_mut().zip(q) {
            *ki = mt * *ki + rest * *qi;
        }
    }
    Ok(())
}
