//! Statistical convergence diagnostic for constant-rate SGDM.
//!
//! While SGDM makes progress, successive stochastic gradients point the
//! same way and their inner products are mostly positive; once the
//! iterates oscillate inside the stationary region, the products turn
//! negative *in expectation* — but only when momentum is small. The
//! diagnostic therefore has two phases:
//!
//! 1. **Switch**: watch a cheap convergence heuristic (epoch-mean squared
//!    step length or gradient norm); when it falls under a threshold at a
//!    period boundary, reduce momentum β → β′ once, at iteration α.
//! 2. **Accumulate and stop**: after a burn-in past α, add each inner
//!    product ∇ℓ(θₙ₋₁,ξₙ)⊤∇ℓ(θₙ₋₂,ξₙ₋₁) to a compensated running sum S;
//!    declare convergence the first time S < 0 at a period boundary.
//!
//! S is a running sum, not a mean — activation only looks at its sign,
//! and the sum form keeps the update branch-free. Consumers that want a
//! mean divide by [`DiagnosticState::n_accumulated`].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::{set_momentum, sgdm_step, HyperParams, OptimizerState};
use crate::problems::{epoch_batches, loss, stochastic_gradient, LossModel};
use crate::record::{RecordRow, RunRecord};
use crate::rng::RngStream;
use crate::vector::{cosine_similarity, dot, KahanSum, ParamVector};

/// Which per-iteration quantity the switch heuristic averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    /// Mean of ‖θᵢ − θᵢ₋₁‖² over the last check period.
    IterateDistance,
    /// Mean of ‖∇ℓᵢ‖² over the last check period.
    GradNorm,
}

/// How the switch threshold T is derived.
///
/// The heuristic's absolute scale varies by orders of magnitude across
/// problems and initializations, so three rules are provided. A fixed
/// `absolute` threshold of 0 can never be crossed (the comparison is
/// strict) and is the idiom for disabling the switch entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdRule {
    /// T = τ·h(first full period): fire when the heuristic drops below a
    /// fraction of its initial value. The default, with τ = 0.1.
    RelativeToFirst { tau: f64 },
    /// Fire when the heuristic drops below τ times its running maximum.
    /// Robust when the heuristic first *grows* (e.g. slow escapes from a
    /// flat region), where the first period is unrepresentative.
    RelativeToPeak { tau: f64 },
    /// Fixed threshold T.
    Absolute { t: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::RelativeToFirst { tau: 0.1 }
    }
}

/// Diagnostic inputs: threshold rule, checking period c (iterations),
/// burn-in (iterations past the switch), heuristic kind, and the reduced
/// momentum β′.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticConfig {
    pub check_period_c: usize,
    pub burnin: usize,
    pub heuristic_kind: HeuristicKind,
    pub beta_final: f64,
    pub threshold: ThresholdRule,
}

impl DiagnosticConfig {
    /// Defaults for a problem with `iters_per_epoch` iterations per
    /// epoch: check every epoch, burn in for one epoch, relative
    /// threshold τ = 0.1 on the iterate-distance heuristic, β′ = 0.2.
    pub fn per_epoch(iters_per_epoch: usize) -> Self {
        Self {
            threshold: ThresholdRule::default(),
            check_period_c: iters_per_epoch.max(1),
            burnin: iters_per_epoch.max(1),
            heuristic_kind: HeuristicKind::IterateDistance,
            beta_final: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.check_period_c == 0 {
            return Err(Error::InvalidArgument("check_period_c must be >= 1".into()));
        }
        if self.burnin == 0 {
            return Err(Error::InvalidArgument("burnin must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta_final) {
            return Err(Error::InvalidArgument(format!(
                "beta_final must be in [0, 1), got {}",
                self.beta_final
            )));
        }
        let param_ok = match self.threshold {
            ThresholdRule::RelativeToFirst { tau } | ThresholdRule::RelativeToPeak { tau } => {
                tau.is_finite() && tau > 0.0
            }
            ThresholdRule::Absolute { t } => t.is_finite() && t >= 0.0,
        };
        if !param_ok {
            return Err(Error::InvalidArgument(format!(
                "threshold parameter out of range: {:?}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Mutable diagnostic state carried across iterations.
#[derive(Debug, Clone)]
pub struct DiagnosticState {
    s: KahanSum,
    alpha: u64,
    switched: bool,
    n_accumulated: u64,
    heuristic_window: VecDeque<f64>,
    window_cap: usize,
    activated_at: Option<u64>,
    resolved_t: Option<f64>,
    peak_h: Option<f64>,
}

impl DiagnosticState {
    /// Fresh state: no switch yet, empty sum.
    pub fn new(cfg: &DiagnosticConfig) -> Self {
        Self {
            s: KahanSum::new(),
            alpha: 0,
            switched: false,
            n_accumulated: 0,
            heuristic_window: VecDeque::with_capacity(cfg.check_period_c),
            window_cap: cfg.check_period_c,
            activated_at: None,
            resolved_t: None,
            peak_h: None,
        }
    }

    /// State for a later stage of a schedule whose switch already fired:
    /// the switch stays disabled and S accumulates once the stage-local
    /// iteration passes the burn-in.
    pub fn continued(cfg: &DiagnosticConfig) -> Self {
        Self {
            switched: true,
            ..Self::new(cfg)
        }
    }

    /// Compensated running sum S.
    pub fn statistic(&self) -> f64 {
        self.s.value()
    }

    /// Momentum-switch iteration α (0 while the switch has not fired).
    pub fn alpha(&self) -> u64 {
        self.alpha
    }

    /// True once the switch has fired (or the state was constructed as a
    /// continuation of a schedule whose switch fired earlier).
    pub fn switched(&self) -> bool {
        self.switched
    }

    /// Number of inner products accumulated into S.
    pub fn n_accumulated(&self) -> u64 {
        self.n_accumulated
    }

    /// Iteration of the first S < 0 boundary, if reached.
    pub fn activated_at(&self) -> Option<u64> {
        self.activated_at
    }

    /// Record one per-iteration heuristic input (the driver feeds the
    /// quantity selected by [`HeuristicKind`]).
    pub fn push_heuristic_sample(&mut self, value: f64) {
        if self.heuristic_window.len() == self.window_cap {
            self.heuristic_window.pop_front();
        }
        self.heuristic_window.push_back(value);
    }

    /// True when S may be updated at iteration `n`: the switch has fired
    /// and the burn-in past it has elapsed.
    pub fn accumulation_active(&self, cfg: &DiagnosticConfig, n: u64) -> bool {
        self.switched && n > self.alpha + cfg.burnin as u64
    }
}

/// Add the inner product of the current and previous stochastic
/// gradients into S — guarded, not erroring: before the switch (or
/// during burn-in) the call is a no-op.
pub fn pflug_update(
    ds: &mut DiagnosticState,
    cfg: &DiagnosticConfig,
    grad_now: &ParamVector,
    grad_prev: &ParamVector,
    n: u64,
) -> Result<()> {
    let ip = dot(grad_now, grad_prev)?;
    if ds.accumulation_active(cfg, n) {
        ds.s.add(ip);
        ds.n_accumulated += 1;
    }
    Ok(())
}

/// Evaluate the momentum-switch condition at iteration `n` with the
/// current heuristic value. Fires at most once; on fire, α ← n and the
/// caller must apply [`set_momentum`] with β′.
pub fn momentum_switch(
    ds: &mut DiagnosticState,
    cfg: &DiagnosticConfig,
    heuristic_value: f64,
    n: u64,
) -> bool {
    if ds.switched || n % cfg.check_period_c as u64 != 0 {
        return false;
    }
    let fire = match cfg.threshold {
        ThresholdRule::Absolute { t } => heuristic_value < t,
        ThresholdRule::RelativeToFirst { tau } => match ds.resolved_t {
            Some(t) => heuristic_value < t,
            None => {
                ds.resolved_t = Some(tau * heuristic_value);
                false
            }
        },
        ThresholdRule::RelativeToPeak { tau } => {
            let fire = ds.peak_h.is_some_and(|peak| heuristic_value < tau * peak);
            let peak = ds.peak_h.map_or(heuristic_value, |p| p.max(heuristic_value));
            ds.peak_h = Some(peak);
            fire
        }
    };
    if fire {
        ds.alpha = n;
        ds.switched = true;
    }
    fire
}

/// Mean heuristic input over the last full check period, or `None` while
/// the window is still filling (the caller skips the check).
pub fn heuristic_value(ds: &DiagnosticState) -> Option<f64> {
    if ds.heuristic_window.len() < ds.window_cap {
        return None;
    }
    Some(ds.heuristic_window.iter().sum::<f64>() / ds.window_cap as f64)
}

/// True iff S < 0 (strictly) at a check-period boundary after at least
/// one accumulation; records the activation iteration on first success.
pub fn check_activation(ds: &mut DiagnosticState, cfg: &DiagnosticConfig, n: u64) -> bool {
    if n % cfg.check_period_c as u64 != 0 || ds.n_accumulated == 0 {
        return false;
    }
    if ds.statistic() < 0.0 {
        ds.activated_at.get_or_insert(n);
        return true;
    }
    false
}

/// How a diagnostic-driven run ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RunOutcome {
    /// The diagnostic declared convergence at this iteration.
    Activated { at: u64 },
    /// The epoch budget ran out first (covers both late activation and
    /// runs whose switch never fired — inspect the record's events to
    /// tell them apart).
    NoActivation,
    /// An iterate or gradient became non-finite; the record holds the
    /// trace up to the failure.
    Diverged { at: u64, detail: String },
}

/// Result of [`run_with_diagnostic`]: the stopping iterate when the
/// diagnostic fired, plus the full per-iteration record.
#[derive(Debug)]
pub struct DiagnosticRun {
    pub outcome: RunOutcome,
    pub theta_at_activation: Option<ParamVector>,
    pub record: RunRecord,
}

pub(crate) struct StageRun {
    pub state: Option<OptimizerState>,
    pub diag: DiagnosticState,
    pub outcome: RunOutcome,
    pub iterations: u64,
}

/// Drive one diagnostic stage: optimizer steps, heuristic bookkeeping,
/// switch and activation checks at period boundaries. Iteration indices
/// in `record` are global (continue across schedule stages); the
/// diagnostic's own guards run on stage-local indices.
pub(crate) fn run_stage(
    model: &LossModel,
    mut state: OptimizerState,
    mut diag: DiagnosticState,
    cfg: &DiagnosticConfig,
    rng: &mut RngStream,
    max_epochs: usize,
    record: &mut RunRecord,
    record_thetas: bool,
) -> Result<StageRun> {
    let data_len = model.dataset.len();
    let optimum = model.dataset.optimum.clone();
    let mut prev_grad: Option<ParamVector> = None;
    let mut n_stage: u64 = 0;

    if record_thetas && record.thetas().is_empty() {
        record.push_theta(state.theta().clone());
    }

    for _ in 0..max_epochs {
        for batch in epoch_batches(data_len, state.hp().batch_size, rng)? {
            let global_n = state.n() + 1;
            n_stage += 1;

            let (gamma_now, beta_now) = (state.hp().gamma, state.hp().beta);
            let step = (|| -> Result<(OptimizerState, ParamVector, f64)> {
                let g = stochastic_gradient(model, state.theta(), &batch)?;
                let l = loss(model, state.theta(), &batch)?;
                let next = sgdm_step(state.clone(), &g)?;
                Ok((next, g, l))
            })();
            let (next_state, grad, loss_now) = match step {
                Ok(v) => v,
                Err(e) if e.is_divergence() => {
                    let e = e.at_iteration(global_n);
                    let detail = match &e {
                        Error::Divergence { detail, .. } => detail.clone(),
                        _ => unreachable!(),
                    };
                    return Ok(StageRun {
                        state: None,
                        diag,
                        outcome: RunOutcome::Diverged {
                            at: global_n,
                            detail,
                        },
                        iterations: n_stage - 1,
                    });
                }
                Err(e) => return Err(e),
            };
            state = next_state;

            let ip = match &prev_grad {
                Some(pg) => dot(&grad, pg)?,
                None => 0.0,
            };
            let cosine = match &prev_grad {
                Some(pg) if grad.norm_sq() > 0.0 && pg.norm_sq() > 0.0 => {
                    cosine_similarity(&grad, pg)?
                }
                _ => 0.0,
            };
            if let Some(pg) = &prev_grad {
                pflug_update(&mut diag, cfg, &grad, pg, n_stage)?;
            }
            let h_input = match cfg.heuristic_kind {
                HeuristicKind::IterateDistance => state.step_norm_sq(),
                HeuristicKind::GradNorm => grad.norm_sq(),
            };
            diag.push_heuristic_sample(h_input);

            record.push_row(RecordRow {
                iteration: global_n,
                inner_product: ip,
                statistic_s: diag.statistic(),
                loss_estimate: loss_now,
                dist_to_optimum_sq: optimum
                    .as_ref()
                    .map(|t| state.theta().dist_sq(t))
                    .transpose()?,
                grad_norm_sq: grad.norm_sq(),
                cosine_prev: cosine,
                gamma_in_effect: gamma_now,
                beta_in_effect: beta_now,
            })?;
            if record_thetas {
                record.push_theta(state.theta().clone());
            }
            prev_grad = Some(grad);

            if n_stage % cfg.check_period_c as u64 == 0 {
                if check_activation(&mut diag, cfg, n_stage) {
                    record.mark_activation(global_n);
                    return Ok(StageRun {
                        state: Some(state),
                        diag,
                        outcome: RunOutcome::Activated { at: global_n },
                        iterations: n_stage,
                    });
                }
                if let Some(h) = heuristic_value(&diag) {
                    if momentum_switch(&mut diag, cfg, h, n_stage) {
                        state = set_momentum(state, cfg.beta_final)?;
                        record.mark_momentum_switch(global_n);
                    }
                }
            }
        }
    }

    Ok(StageRun {
        state: Some(state),
        diag,
        outcome: RunOutcome::NoActivation,
        iterations: n_stage,
    })
}

/// Train with the convergence diagnostic until it activates or the epoch
/// budget runs out.
///
/// The first step is pure SGD (zero initial velocity); the heuristic is
/// evaluated every `check_period_c` iterations; S accumulates only after
/// the momentum switch plus burn-in; activation returns θₙ immediately.
/// When the diagnostic never fires within `max_epochs`, the iterate is
/// withheld (`theta_at_activation = None`) and the full record is
/// returned — late and never-firing runs are measured this way.
/// Divergence is reported in the outcome with the partial record intact.
pub fn run_with_diagnostic(
    model: &LossModel,
    hp: HyperParams,
    cfg: &DiagnosticConfig,
    theta0: ParamVector,
    rng: &mut RngStream,
    max_epochs: usize,
) -> Result<DiagnosticRun> {
    hp.validate()?;
    cfg.validate()?;
    if max_epochs == 0 {
        return Err(Error::InvalidArgument("max_epochs must be >= 1".into()));
    }
    if theta0.dim() != model.dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dataset.dim(),
            got: theta0.dim(),
        });
    }

    let state = OptimizerState::new(theta0, hp)?;
    let diag = DiagnosticState::new(cfg);
    let mut record = RunRecord::new();
    let record_thetas = model.dataset.optimum.is_some();
    let stage = run_stage(
        model,
        state,
        diag,
        cfg,
        rng,
        max_epochs,
        &mut record,
        record_thetas,
    )?;

    let theta_at_activation = match (&stage.outcome, stage.state) {
        (RunOutcome::Activated { .. }, Some(s)) => Some(s.theta().clone()),
        _ => None,
    };
    Ok(DiagnosticRun {
        outcome: stage.outcome,
        theta_at_activation,
        record,
    })
}
