//! Automatic step-size decay driven by the convergence diagnostic.
//!
//! Instead of a hand-tuned decay schedule, the rate γ is held constant
//! until the diagnostic declares the iterates stationary, then cut by a
//! factor ρ and the diagnostic restarted — down to a floor γ_min. The
//! momentum switch is global: once β has been reduced in some stage,
//! later stages start with the reduction already applied and only run
//! the accumulate-and-stop phase.

use serde::{Deserialize, Serialize};

use crate::diagnostic::{run_stage, DiagnosticConfig, DiagnosticState, RunOutcome};
use crate::error::{Error, Result};
use crate::optimizer::{HyperParams, OptimizerState};
use crate::problems::{epoch_batches, loss, stochastic_gradient, LossModel};
use crate::record::{RecordRow, RunRecord};
use crate::rng::RngStream;
use crate::vector::{cosine_similarity, dot, ParamVector};

/// Schedule inputs: initial and floor step sizes, decay factor ρ, the
/// per-stage epoch budget, and the diagnostic/optimizer settings shared
/// by every stage (`hp.gamma` is overridden stage by stage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub gamma0: f64,
    pub gamma_min: f64,
    pub rho: f64,
    pub stage_max_epochs: usize,
    pub diag: DiagnosticConfig,
    pub hp: HyperParams,
}

impl ScheduleConfig {
    /// Defaults derived from an initial rate: ρ = 0.1 and
    /// γ_min = γ0 · 10⁻³ (three reductions).
    pub fn with_defaults(gamma0: f64, hp: HyperParams, diag: DiagnosticConfig) -> Self {
        Self {
            gamma0,
            gamma_min: gamma0 * 1e-3,
            rho: 0.1,
            stage_max_epochs: hp.epochs,
            diag,
            hp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.diag.validate()?;
        if !(self.gamma0.is_finite() && self.gamma0 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma0 must be positive and finite, got {}",
                self.gamma0
            )));
        }
        if !(self.gamma_min.is_finite() && self.gamma_min > 0.0 && self.gamma_min < self.gamma0) {
            return Err(Error::InvalidArgument(format!(
                "gamma_min must satisfy 0 < gamma_min < gamma0, got {}",
                self.gamma_min
            )));
        }
        if !(self.rho.is_finite() && self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rho must lie strictly inside (0, 1), got {}",
                self.rho
            )));
        }
        if self.stage_max_epochs == 0 {
            return Err(Error::InvalidArgument("stage_max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Why a stage handed control back to the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEnd {
    /// The diagnostic activated.
    Diagnostic,
    /// The per-stage epoch budget ran out; γ advances anyway.
    StageTimeout,
}

/// One stage of the schedule: the rate it ran at, how many iterations it
/// took, and what ended it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub gamma: f64,
    pub iterations: u64,
    pub ended_by: StageEnd,
}

/// Full schedule output: per-stage summaries, the final iterate, the
/// concatenated per-iteration record, stage-timeout warnings, and a
/// divergence marker when the run aborted early (the record then holds
/// the partial trace).
#[derive(Debug)]
pub struct ScheduleTrace {
    pub stages: Vec<StageSummary>,
    pub final_theta: ParamVector,
    pub record: RunRecord,
    pub warnings: Vec<String>,
    pub diverged: Option<(u64, String)>,
}

/// Run the full decayed-rate procedure: repeat (diagnostic stage at γ,
/// then γ ← ργ) while γ > γ_min. Stage k runs at exactly γ0·ρᵏ. Velocity
/// and iterate carry across stage boundaries; the running sum S resets
/// each stage.
pub fn auto_lr(
    model: &LossModel,
    cfg: &ScheduleConfig,
    theta0: ParamVector,
    rng: &mut RngStream,
) -> Result<ScheduleTrace> {
    cfg.validate()?;
    if theta0.dim() != model.dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dataset.dim(),
            got: theta0.dim(),
        });
    }

    let mut hp = cfg.hp;
    hp.gamma = cfg.gamma0;
    let mut state = OptimizerState::new(theta0, hp)?;
    let mut switched = false;
    let mut record = RunRecord::new();
    let record_thetas = model.dataset.optimum.is_some();
    let mut stages = Vec::new();
    let mut warnings = Vec::new();
    let mut diverged = None;

    let mut k: i32 = 0;
    loop {
        let gamma = cfg.gamma0 * cfg.rho.powi(k);
        // The slack absorbs rounding in ρᵏ so that e.g. ρ = 0.1 with
        // γ_min = γ0/1000 runs exactly three stages, as it would in
        // exact arithmetic (0.1³ > 10⁻³ as binary floats).
        if gamma <= cfg.gamma_min * (1.0 + 1e-9) {
            break;
        }
        state.set_gamma(gamma)?;
        let diag = if switched {
            DiagnosticState::continued(&cfg.diag)
        } else {
            DiagnosticState::new(&cfg.diag)
        };
        let stage = run_stage(
            model,
            state,
            diag,
            &cfg.diag,
            rng,
            cfg.stage_max_epochs,
            &mut record,
            record_thetas,
        )?;
        switched = stage.diag.switched();

        match stage.outcome {
            RunOutcome::Activated { at } => {
                stages.push(StageSummary {
                    gamma,
                    iterations: stage.iterations,
                    ended_by: StageEnd::Diagnostic,
                });
                record.mark_lr_reduction(at);
            }
            RunOutcome::NoActivation => {
                stages.push(StageSummary {
                    gamma,
                    iterations: stage.iterations,
                    ended_by: StageEnd::StageTimeout,
                });
                warnings.push(format!(
                    "stage {k} at gamma = {gamma:.6e} hit its {}-epoch budget without \
                     activation; reducing the rate anyway",
                    cfg.stage_max_epochs
                ));
                if let Some(row) = record.rows().last() {
                    record.mark_lr_reduction(row.iteration);
                }
            }
            RunOutcome::Diverged { at, detail } => {
                stages.push(StageSummary {
                    gamma,
                    iterations: stage.iterations,
                    ended_by: StageEnd::StageTimeout,
                });
                diverged = Some((at, detail));
            }
        }

        match stage.state {
            Some(s) => state = s,
            // Divergence consumed the optimizer state; stop with the
            // partial trace and the last recorded iterate.
            None => {
                let final_theta = record
                    .thetas()
                    .last()
                    .cloned()
                    .unwrap_or_else(|| ParamVector::zeros(model.dataset.dim()));
                return Ok(ScheduleTrace {
                    stages,
                    final_theta,
                    record,
                    warnings,
                    diverged,
                });
            }
        }
        k += 1;
    }

    Ok(ScheduleTrace {
        stages,
        final_theta: state.theta().clone(),
        record,
        warnings,
        diverged,
    })
}

/// Classic γₙ = γ0/n comparison schedule (n starts at 1), run for a
/// fixed number of epochs with no diagnostic. Divergence is reported in
/// the returned pair rather than as an error so sweep tables can mark
/// the cell and move on.
pub struct BaselineRun {
    pub final_theta: Option<ParamVector>,
    pub record: RunRecord,
    pub diverged: Option<(u64, String)>,
}

pub fn decreasing_lr_baseline(
    model: &LossModel,
    gamma0: f64,
    hp: HyperParams,
    theta0: ParamVector,
    epochs: usize,
    rng: &mut RngStream,
) -> Result<BaselineRun> {
    hp.validate()?;
    if !(gamma0.is_finite() && gamma0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma0 must be positive and finite, got {gamma0}"
        )));
    }
    if epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    if theta0.dim() != model.dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dataset.dim(),
            got: theta0.dim(),
        });
    }

    let mut state = OptimizerState::new(theta0, hp)?;
    let mut record = RunRecord::new();
    let record_thetas = model.dataset.optimum.is_some();
    let optimum = model.dataset.optimum.clone();
    if record_thetas {
        record.push_theta(state.theta().clone());
    }
    let mut prev_grad: Option<ParamVector> = None;

    for _ in 0..epochs {
        for batch in epoch_batches(model.dataset.len(), state.hp().batch_size, rng)? {
            let n = state.n() + 1;
            state.set_gamma(gamma0 / n as f64)?;
            let (gamma_now, beta_now) = (state.hp().gamma, state.hp().beta);

            let step = (|| -> Result<(OptimizerState, ParamVector, f64)> {
                let g = stochastic_gradient(model, state.theta(), &batch)?;
                let l = loss(model, state.theta(), &batch)?;
                let next = crate::optimizer::sgdm_step(state.clone(), &g)?;
                Ok((next, g, l))
            })();
            let (next_state, grad, loss_now) = match step {
                Ok(v) => v,
                Err(e) if e.is_divergence() => {
                    let detail = match e.at_iteration(n) {
                        Error::Divergence { detail, .. } => detail,
                        _ => unreachable!(),
                    };
                    return Ok(BaselineRun {
                        final_theta: None,
                        record,
                        diverged: Some((n, detail)),
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
            record.push_row(RecordRow {
                iteration: n,
                inner_product: ip,
                statistic_s: 0.0,
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
        }
    }

    Ok(BaselineRun {
        final_theta: Some(state.theta().clone()),
        record,
        diverged: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostic::{HeuristicKind, ThresholdRule};
    use crate::problems::{gen_quadratic, LossKind};

    fn quad_setup(seed: u64) -> (LossModel, RngStream) {
        let mut rng = RngStream::new(seed, 0);
        let data = gen_quadratic(10, 500, 1.0, &mut rng).unwrap();
        (LossModel::new(LossKind::Quadratic, data), rng)
    }

    fn diag_cfg() -> DiagnosticConfig {
        DiagnosticConfig {
            threshold: ThresholdRule::RelativeToFirst { tau: 0.5 },
            check_period_c: 25,
            burnin: 25,
            heuristic_kind: HeuristicKind::GradNorm,
            beta_final: 0.2,
        }
    }

    #[test]
    fn gamma_sequence_is_exact_powers() {
        let (model, mut rng) = quad_setup(11);
        let hp = HyperParams::new(0.05, 0.2, 0.0, 25, 20).unwrap();
        let cfg = ScheduleConfig {
            gamma0: 0.05,
            gamma_min: 0.05 * 1e-3,
            rho: 0.1,
            stage_max_epochs: 40,
            diag: diag_cfg(),
            hp,
        };
        let trace = auto_lr(&model, &cfg, ParamVector::zeros(10), &mut rng).unwrap();
        assert!(trace.diverged.is_none());
        assert_eq!(trace.stages.len(), 3);
        for (k, stage) in trace.stages.iter().enumerate() {
            assert_eq!(stage.gamma, 0.05 * 0.1f64.powi(k as i32));
        }
        assert_eq!(trace.record.events().lr_reductions.len(), 3);
    }

    #[test]
    fn velocity_and_iterations_continue_across_stages() {
        let (model, mut rng) = quad_setup(12);
        let hp = HyperParams::new(0.05, 0.5, 0.2, 25, 20).unwrap();
        let cfg = ScheduleConfig {
            gamma0: 0.05,
            gamma_min: 0.004,
            rho: 0.1,
            stage_max_epochs: 40,
            diag: diag_cfg(),
            hp,
        };
        let trace = auto_lr(&model, &cfg, ParamVector::zeros(10), &mut rng).unwrap();
        let rows = trace.record.rows();
        for w in rows.windows(2) {
            assert_eq!(w[1].iteration, w[0].iteration + 1);
        }
        let total: u64 = trace.stages.iter().map(|s| s.iterations).sum();
        assert_eq!(rows.len() as u64, total);
        // Stage 2 runs at the reduced rate in the recorded rows.
        let stage1_iters = trace.stages[0].iterations;
        assert_eq!(
            rows[stage1_iters as usize].gamma_in_effect,
            0.05 * 0.1f64.powi(1)
        );
    }

    #[test]
    fn momentum_switch_fires_once_globally() {
        let (model, mut rng) = quad_setup(13);
        let hp = HyperParams::new(0.05, 0.8, 0.2, 25, 20).unwrap();
        let cfg = ScheduleConfig {
            gamma0: 0.05,
            gamma_min: 0.05 * 1e-3,
            rho: 0.1,
            stage_max_epochs: 40,
            diag: diag_cfg(),
            hp,
        };
        let trace = auto_lr(&model, &cfg, ParamVector::zeros(10), &mut rng).unwrap();
        let switch = trace
            .record
            .events()
            .momentum_switch_at
            .expect("switch fires in stage 1");
        // After the switch every recorded step uses the reduced beta.
        for row in trace.record.rows() {
            if row.iteration > switch {
                assert_eq!(row.beta_in_effect, 0.2);
            }
        }
    }

    #[test]
    fn stage_timeout_advances_with_warning() {
        // Tiny budget: the diagnostic cannot even finish burn-in, so
        // every stage times out, yet the schedule still walks down to
        // gamma_min and reports why.
        let (model, mut rng) = quad_setup(14);
        let hp = HyperParams::new(0.05, 0.2, 0.0, 25, 1).unwrap();
        let cfg = ScheduleConfig {
            gamma0: 0.05,
            gamma_min: 0.0049,
            rho: 0.1,
            stage_max_epochs: 1,
            diag: DiagnosticConfig {
                check_period_c: 100,
                burnin: 100,
                ..diag_cfg()
            },
            hp,
        };
        let trace = auto_lr(&model, &cfg, ParamVector::zeros(10), &mut rng).unwrap();
        assert_eq!(trace.stages.len(), 2);
        assert!(trace
            .stages
            .iter()
            .all(|s| s.ended_by == StageEnd::StageTimeout));
        assert_eq!(trace.warnings.len(), 2);
        assert!(trace.diverged.is_none());
    }

    #[test]
    fn degenerate_budget_runs_zero_stages() {
        let (model, mut rng) = quad_setup(15);
        let hp = HyperParams::new(0.05, 0.2, 0.0, 25, 20).unwrap();
        let cfg = ScheduleConfig {
            gamma0: 0.05,
            gamma_min: 0.05,
            rho: 0.1,
            stage_max_epochs: 10,
            diag: diag_cfg(),
            hp,
        };
        assert!(auto_lr(&model, &cfg, ParamVector::zeros(10), &mut rng).is_err());
        // gamma_min == gamma0 is rejected outright; a gamma_min just
        // below gamma0 yields exactly one stage.
        let cfg = ScheduleConfig {
            gamma_min: 0.05 - 1e-9,
            ..cfg
        };
        let trace = auto_lr(&model, &cfg, ParamVector::zeros(10), &mut rng).unwrap();
        assert_eq!(trace.stages.len(), 1);
    }

    #[test]
    fn schedule_divergence_keeps_partial_trace() {
        let (model, mut rng) = quad_setup(16);
        let hp = HyperParams::new(100.0, 0.8, 0.2, 25, 20).unwrap();
        let cfg = ScheduleConfig {
            gamma0: 100.0,
            gamma_min: 0.1,
            rho: 0.1,
            stage_max_epochs: 5,
            diag: diag_cfg(),
            hp,
        };
        let trace = auto_lr(&model, &cfg, ParamVector::zeros(10), &mut rng).unwrap();
        assert!(trace.diverged.is_some());
        assert!(!trace.record.is_empty() || trace.diverged.unwrap().0 == 1);
    }

    #[test]
    fn baseline_rate_decays_harmonically() {
        let (model, mut rng) = quad_setup(17);
        let hp = HyperParams::new(0.5, 0.2, 0.0, 25, 3).unwrap();
        let run = decreasing_lr_baseline(
            &model,
            0.5,
            hp,
            ParamVector::zeros(10),
            3,
            &mut rng,
        )
        .unwrap();
        assert!(run.diverged.is_none());
        let rows = run.record.rows();
        assert_eq!(rows.len(), 60);
        for row in rows {
            assert!((row.gamma_in_effect - 0.5 / row.iteration as f64).abs() < 1e-15);
        }
        assert!(run.final_theta.is_some());
    }
}
