//! Adam over index groups of a shared parameter vector.
//!
//! ```text
//! m = β₁ m + (1 - β₁) g
//! v = β₂ v + (1 - β₂) g²
//! θ = θ - lr · (m / (1 - β₁ᵗ)) / (√(v / (1 - β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    /// Positions in the parameter vector this group owns.
    pub indices: Vec<usize>,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl ParamGroup {
    pub fn new(indices: Vec<usize>, lr: f64) -> Self {
        let n = indices.len();
        Self {
            indices,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub groups: Vec<ParamGroup>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Clamp updated parameters at this floor (weights must stay non-negative).
    pub lower_bound: Option<f64>,
}

impl OptimizerState {
    pub fn new(groups: Vec<ParamGroup>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            groups,
            step: 0,
            beta1,
            beta2,
            epsilon,
            lower_bound: None,
        }
    }

    /// One Adam step. `grads[g][k]` is the gradient of parameter
    /// `groups[g].indices[k]`; `params` is updated in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.groups.len() {
            return Err(Error::Shape(format!(
                "{} gradient groups for {} parameter groups",
                grads.len(),
                self.groups.len()
            )));
        }
        for (g, grad) in self.groups.iter().zip(grads) {
            if grad.len() != g.indices.len() {
                return Err(Error::Shape(format!(
                    "group of {} parameters got {} gradients",
                    g.indices.len(),
                    grad.len()
                )));
            }
            if let Some(&i) = g.indices.iter().find(|&&i| i >= params.len()) {
                return Err(Error::Shape(format!("parameter index {i} out of range")));
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step: self.step as usize + 1,
                    message: "non-finite gradient".into(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (group, grad) in self.groups.iter_mut().zip(grads) {
            for (k, &i) in group.indices.iter().enumerate() {
                let g = grad[k];
                group.m[k] = self.beta1 * group.m[k] + (1.0 - self.beta1) * g;
                group.v[k] = self.beta2 * group.v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = group.m[k] / bias1;
                let v_hat = group.v[k] / bias2;
                let mut p = params[i] - group.lr * m_hat / (v_hat.sqrt() + self.epsilon);
                if let Some(floor) = self.lower_bound {
                    p = p.max(floor);
                }
                params[i] = p;
            }
        }
        Ok(())
    }
}

/// Functional form: returns the advanced state and parameters.
pub fn adam_step(
    state: &OptimizerState,
    params: &[f64],
    grads: &[Vec<f64>],
) -> Result<(OptimizerState, Vec<f64>)> {
    let mut next = state.clone();
    let mut p = params.to_vec();
    next.step(&mut p, grads)?;
    Ok((next, p))
}
