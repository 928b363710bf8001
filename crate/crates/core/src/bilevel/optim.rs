//! Gradient descent and Adam, both as differentiable tape steps (inner
//! problem) and as plain in-place updates (outer problem).

use serde::{Deserialize, Serialize};

use crate::ad::{Tape, VarId};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Gd,
    Adam,
}

/// An optimizer whose update is recorded on a tape, so that later
/// iterates remain differentiable functions of everything upstream.
///
/// Adam follows the usual bias-corrected form
/// `p ← p − η/(1−β₁ᵗ) · m / (√v/√(1−β₂ᵗ) + ε)`.
#[derive(Clone, Debug)]
pub struct SmoothOptimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<(VarId, VarId)>,
    t: u32,
}

impl SmoothOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS, state: Vec::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, tape: &mut Tape, params: &[VarId], grads: &[VarId]) -> Result<Vec<VarId>> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.kind == OptimizerKind::Adam && self.t > 0 && self.state.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer state tracks {} parameters, step received {}",
                self.state.len(),
                params.len()
            )));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Gd => params
                .iter()
                .zip(grads)
                .map(|(&p, &g)| {
                    let u = tape.scale(g, self.lr)?;
                    tape.sub(p, u)
                })
                .collect(),
            OptimizerKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                let mut out = Vec::with_capacity(params.len());
                let mut state = Vec::with_capacity(params.len());
                for (k, (&p, &g)) in params.iter().zip(grads).enumerate() {
                    let g_scaled = tape.scale(g, 1.0 - self.beta1)?;
                    let g_sq = tape.square(g)?;
                    let g_sq_scaled = tape.scale(g_sq, 1.0 - self.beta2)?;
                    let (m, v) = if self.t == 1 {
                        (g_scaled, g_sq_scaled)
                    } else {
                        let (m0, v0) = self.state[k];
                        let m_decay = tape.scale(m0, self.beta1)?;
                        let v_decay = tape.scale(v0, self.beta2)?;
                        (tape.add(m_decay, g_scaled)?, tape.add(v_decay, g_sq_scaled)?)
                    };
                    let root = tape.sqrt(v)?;
                    let corrected = tape.scale(root, 1.0 / bc2.sqrt())?;
                    let denom = tape.add_scalar(corrected, self.eps)?;
                    let ratio = tape.div(m, denom)?;
                    let update = tape.scale(ratio, self.lr / bc1)?;
                    out.push(tape.sub(p, update)?);
                    state.push((m, v));
                }
                self.state = state;
                Ok(out)
            }
        }
    }
}

/// In-place optimizer over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct PlainOptimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl PlainOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::contract(format!("{} parameters but {} gradients", params.len(), grad.len())));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Gd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                } else if self.m.len() != params.len() {
                    return Err(Error::contract("optimizer state length changed between steps"));
                }
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for k in 0..params.len() {
                    self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * grad[k];
                    self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * (grad[k] * grad[k]);
                    // Same operation order as the tape form, so both agree bitwise.
                    let denom = self.v[k].sqrt() * (1.0 / bc2.sqrt()) + ADAM_EPS;
                    params[k] -= (self.m[k] / denom) * (self.lr / bc1);
                }
            }
        }
        Ok(())
    }
}
