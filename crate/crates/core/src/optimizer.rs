//! Heavy-ball SGD: θₙ₊₁ = θₙ − γ·∇ℓ(θₙ, ξₙ₊₁) + β(θₙ − θₙ₋₁).
//!
//! Momentum lives in the iterate difference θₙ − θₙ₋₁ rather than a
//! separate velocity buffer: the convergence statistic's analysis is
//! phrased in those differences, and the reduction β → β′ then needs no
//! velocity bookkeeping — the in-flight motion simply decays under the
//! new coefficient. The very first step has θ₀ = θ₋₁, i.e. it is a pure
//! SGD step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::ParamVector;

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Learning rate γ > 0.
    pub gamma: f64,
    /// Momentum β ∈ [0, 1).
    pub beta: f64,
    /// Reduced momentum β′ applied when the diagnostic's switch fires;
    /// β′ ∈ [0, β), with β′ = β allowed only at β = 0.
    pub beta_final: f64,
    /// Minibatch size.
    pub batch_size: usize,
    /// Epoch budget.
    pub epochs: usize,
}

impl HyperParams {
    pub fn new(
        gamma: f64,
        beta: f64,
        beta_final: f64,
        batch_size: usize,
        epochs: usize,
    ) -> Result<Self> {
        let hp = Self {
            gamma,
            beta,
            beta_final,
            batch_size,
            epochs,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "beta must be in [0, 1), got {}",
                self.beta
            )));
        }
        let final_ok = (0.0..1.0).contains(&self.beta_final)
            && (self.beta_final < self.beta || (self.beta == 0.0 && self.beta_final == 0.0));
        if !final_ok {
            return Err(Error::InvalidArgument(format!(
                "beta_final must satisfy 0 <= beta_final < beta \
                 (equality only at beta = 0), got beta_final={} beta={}",
                self.beta_final, self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// The optimizer's full state between steps.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    theta: ParamVector,
    theta_prev: ParamVector,
    hp: HyperParams,
    n: u64,
    last_grad: Option<ParamVector>,
}

impl OptimizerState {
    /// Fresh state at θ₀ with zero initial velocity (θ_prev = θ₀).
    pub fn new(theta0: ParamVector, hp: HyperParams) -> Result<Self> {
        hp.validate()?;
        Ok(Self {
            theta_prev: theta0.clone(),
            theta: theta0,
            hp,
            n: 0,
            last_grad: None,
        })
    }

    /// Current iterate θₙ.
    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    /// Previous iterate θₙ₋₁ (equal to θₙ at n = 0).
    pub fn theta_prev(&self) -> &ParamVector {
        &self.theta_prev
    }

    pub fn hp(&self) -> &HyperParams {
        &self.hp
    }

    /// Completed step count n.
    pub fn n(&self) -> u64 {
        self.n
    }

    /// The gradient consumed by the most recent step.
    pub fn last_grad(&self) -> Option<&ParamVector> {
        self.last_grad.as_ref()
    }

    /// ‖θₙ − θₙ₋₁‖², the squared step length.
    pub fn step_norm_sq(&self) -> f64 {
        self.theta
            .dist_sq(&self.theta_prev)
            .expect("state invariant: theta and theta_prev share dimension")
    }

    /// Override the learning rate (the step-decay schedule's knob).
    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gamma must be positive and finite, got {gamma}"
            )));
        }
        self.hp.gamma = gamma;
        Ok(())
    }
}

/// Advance one step with the supplied stochastic gradient.
///
/// Returns the updated state; a non-finite iterate is reported as a
/// divergence tagged with the iteration that produced it.
pub fn sgdm_step(mut state: OptimizerState, grad: &ParamVector) -> Result<OptimizerState> {
    if grad.dim() != state.theta.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.theta.dim(),
            got: grad.dim(),
        });
    }
    let gamma = state.hp.gamma;
    let beta = state.hp.beta;
    let n_next = state.n + 1;

    let mut next = state.theta.clone();
    {
        let next_vals = next.values_mut();
        let theta = state.theta.as_slice();
        let prev = state.theta_prev.as_slice();
        let g = grad.as_slice();
        for i in 0..theta.len() {
            next_vals[i] = theta[i] - gamma * g[i] + beta * (theta[i] - prev[i]);
        }
    }
    if !next.is_finite() {
        return Err(Error::divergence(n_next, "iterate overflowed"));
    }

    state.theta_prev = std::mem::replace(&mut state.theta, next);
    state.n = n_next;
    state.last_grad = Some(grad.clone());
    Ok(state)
}

/// Replace the momentum coefficient, keeping the iterates (and therefore
/// the in-flight velocity) untouched.
pub fn set_momentum(mut state: OptimizerState, beta_new: f64) -> Result<OptimizerState> {
    if !(0.0..1.0).contains(&beta_new) {
        return Err(Error::InvalidArgument(format!(
            "beta must be in [0, 1), got {beta_new}"
        )));
    }
    state.hp.beta = beta_new;
    Ok(state)
}
