//! Experiment drivers: seeded error-rate evaluation of the stopping
//! diagnostic, inner-product distribution statistics, statistic-trace
//! ablations over momentum, and learning-rate robustness sweeps.
//!
//! The drivers share three conventions:
//!
//! - **Streams, not shared state.** Every run inside an experiment draws
//!   from its own [`RngStream`] substream keyed by run index, so results
//!   do not depend on thread count and repeat bit-identically. Two
//!   experiments started from parents with the same seed see *matched*
//!   per-index streams — deliberate for paired designs (same data, one
//!   knob changed); pass different seeds for independent replication.
//! - **Failures are data.** Diverged runs, runs whose diagnostic never
//!   fired, and runs excluded by the matched-minimum gate are counted
//!   and reported, never silently dropped and never fatal.
//! - **Percentages partition activated runs.** Type-1/type-2/good rates
//!   are fractions of the runs whose diagnostic actually fired; the
//!   other outcomes are reported as separate counts.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostic::{
    run_with_diagnostic, DiagnosticConfig, RunOutcome, ThresholdRule,
};
use crate::error::{Error, Result};
use crate::optimizer::HyperParams;
use crate::problems::{
    gen_phase_retrieval, gen_quadratic, sigmoid, Dataset, LossKind, LossModel,
};
use crate::record::RunRecord;
use crate::rng::RngStream;
use crate::schedule::{auto_lr, decreasing_lr_baseline, ScheduleConfig};
use crate::theory::{least_squares_slope, stationary_window};
use crate::vector::{KahanSum, ParamVector};

/// Histogram resolution of [`DistributionStats`].
const HISTOGRAM_BINS: usize = 60;

/// Minimum sample count for distribution statistics and scatter windows.
const MIN_PHASE_SAMPLES: usize = 100;

// ---------------------------------------------------------------------
// Classification of diagnostic runs
// ---------------------------------------------------------------------

/// Which squared-distance unit the error criteria are stated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// ‖a − b‖².
    SquaredNorm,
    /// ‖a − b‖²/p — per-coordinate mean squared error.
    PerCoordMse,
}

impl DistanceMetric {
    pub fn value(&self, a: &ParamVector, b: &ParamVector) -> Result<f64> {
        let d = a.dist_sq(b)?;
        Ok(match self {
            DistanceMetric::SquaredNorm => d,
            DistanceMetric::PerCoordMse => d / a.dim() as f64,
        })
    }
}

/// Error thresholds for classifying a diagnostic activation.
///
/// A run is **type 1** (too early) when the iterate at activation is
/// farther than `eta` from the target minimizer, and **type 2** (too
/// late) when the fraction of the run spent inside the stationary
/// region before stopping exceeds `kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorCriteria {
    /// Stationary-error threshold η on the squared distance.
    pub eta: f64,
    /// Lateness threshold κ on K = (n − k)/n.
    pub kappa: f64,
    /// Epoch budget of each evaluated run.
    pub reference_run_epochs: usize,
    /// Unit of both η comparisons.
    pub metric: DistanceMetric,
}

impl ErrorCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "eta must be positive and finite, got {}",
                self.eta
            )));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "kappa must be in (0, 1), got {}",
                self.kappa
            )));
        }
        if self.reference_run_epochs == 0 {
            return Err(Error::InvalidArgument(
                "reference_run_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome classes of [`classify_run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunClass {
    /// Activated outside the η-ball: stopped too early.
    Type1,
    /// Activated with lateness K > κ: stopped too late.
    Type2,
    /// Activated inside the η-ball with acceptable lateness.
    Good,
    /// The diagnostic never fired within the budget.
    NoActivation,
}

/// Per-run status in an [`ErrorRateReport`]: the classification classes
/// plus the two exclusion outcomes that precede classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Type1,
    Type2,
    Good,
    NoActivation,
    /// The run's final iterate failed the matched-minimum gate.
    GateExcluded,
    /// An iterate or gradient became non-finite.
    Diverged,
}

impl From<RunClass> for RunStatus {
    fn from(c: RunClass) -> Self {
        match c {
            RunClass::Type1 => RunStatus::Type1,
            RunClass::Type2 => RunStatus::Type2,
            RunClass::Good => RunStatus::Good,
            RunClass::NoActivation => RunStatus::NoActivation,
        }
    }
}

/// A classification with the quantities it was decided on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classification {
    pub class: RunClass,
    /// Iteration n at which the diagnostic fired.
    pub activation_iteration: Option<u64>,
    /// Squared distance (in the criteria's metric) from θₙ to the target.
    pub dist_at_activation: Option<f64>,
    /// Lateness K = (n − k)/n, where k is the largest index at which the
    /// iterate was still η-far from θₙ.
    pub lateness: Option<f64>,
}

/// Classify one recorded run against a known target minimizer.
///
/// Semantics: `no_activation` when the diagnostic never fired. Otherwise
/// let n be the activation iteration; **type 1** iff d(θₙ, target) > η.
/// Otherwise scan backwards from n for the largest k with
/// d(θₖ, θₙ) ≥ η (k = 0 when even θ₀ is within η — the run started
/// inside the stationary region), set K = (n − k)/n, and report
/// **type 2** iff K > κ, else **good**.
///
/// The record must carry the per-iterate trajectory (kept automatically
/// for synthetic problems); the function is a pure, deterministic map
/// of the trace.
pub fn classify_run(
    record: &RunRecord,
    target: &ParamVector,
    crit: &ErrorCriteria,
) -> Result<RunClass> {
    classify_run_detailed(record, target, crit).map(|c| c.class)
}

/// [`classify_run`] plus the activation distance and lateness it used.
pub fn classify_run_detailed(
    record: &RunRecord,
    target: &ParamVector,
    crit: &ErrorCriteria,
) -> Result<Classification> {
    crit.validate()?;
    let Some(n) = record.events().diagnostic_activation_at else {
        return Ok(Classification {
            class: RunClass::NoActivation,
            activation_iteration: None,
            dist_at_activation: None,
            lateness: None,
        });
    };
    let thetas = record.thetas();
    if thetas.is_empty() {
        return Err(Error::Unsupported(
            "classification needs the per-iterate trajectory, which this record does not carry"
                .into(),
        ));
    }
    let n_idx = n as usize;
    if n_idx >= thetas.len() {
        return Err(Error::InvalidArgument(format!(
            "activation at iteration {n} but only {} iterates recorded",
            thetas.len()
        )));
    }

    let dist = crit.metric.value(&thetas[n_idx], target)?;
    if dist > crit.eta {
        return Ok(Classification {
            class: RunClass::Type1,
            activation_iteration: Some(n),
            dist_at_activation: Some(dist),
            lateness: None,
        });
    }

    let theta_n = &thetas[n_idx];
    let mut k = 0u64;
    for j in (0..=n_idx).rev() {
        if crit.metric.value(&thetas[j], theta_n)? >= crit.eta {
            k = j as u64;
            break;
        }
    }
    let lateness = (n - k) as f64 / n as f64;
    let class = if lateness > crit.kappa {
        RunClass::Type2
    } else {
        RunClass::Good
    };
    Ok(Classification {
        class,
        activation_iteration: Some(n),
        dist_at_activation: Some(dist),
        lateness: Some(lateness),
    })
}

// ---------------------------------------------------------------------
// Error-rate experiments
// ---------------------------------------------------------------------

/// How each run's starting point is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitKind {
    /// θ₀ = 0.
    Zero,
    /// θ₀ = θ⋆ + √(d0·p)·u with u uniform on the unit sphere: every
    /// coordinate starts a squared distance d0 from the optimum on
    /// average.
    FarFromOptimum { d0: f64 },
    /// θ₀ = s·g/√p with g ~ N(0, I): squared norm s² in expectation.
    ScaledGaussian { scale: f64 },
}

impl InitKind {
    fn sample(&self, optimum: &ParamVector, p: usize, rng: &mut RngStream) -> Result<ParamVector> {
        Ok(match *self {
            InitKind::Zero => ParamVector::zeros(p),
            InitKind::FarFromOptimum { d0 } => {
                let mut g = vec![0.0; p];
                rng.fill_standard_normal(&mut g);
                let g = ParamVector::new(g)?;
                let norm = g.norm();
                if norm == 0.0 {
                    return Err(Error::DegenerateInput("zero direction draw".into()));
                }
                optimum.add(&g.scale((d0 * p as f64).sqrt() / norm))?
            }
            InitKind::ScaledGaussian { scale } => {
                let mut g = vec![0.0; p];
                rng.fill_standard_normal(&mut g);
                ParamVector::new(g)?.scale(scale / (p as f64).sqrt())
            }
        })
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            InitKind::Zero => true,
            InitKind::FarFromOptimum { d0 } => d0.is_finite() && d0 > 0.0,
            InitKind::ScaledGaussian { scale } => scale.is_finite() && scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "init parameter out of range: {self:?}"
            )))
        }
    }
}

/// Full specification of one error-rate experiment: the synthetic
/// problem, the optimizer and diagnostic settings, the starting-point
/// rule, and the classification criteria.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRateDesign {
    /// Name used in reports and artifact files.
    pub label: String,
    /// Quadratic or phase-retrieval (classification needs a computable
    /// target minimizer, so logistic models are not accepted).
    pub loss: LossKind,
    pub p: usize,
    pub n: usize,
    /// Label-noise standard deviation; required for the quadratic,
    /// ignored by the noiseless phase-retrieval generator.
    pub noise_sd: Option<f64>,
    pub hp: HyperParams,
    pub diag: DiagnosticConfig,
    pub init: InitKind,
    pub crit: ErrorCriteria,
    /// Matched-minimum gate for sign-ambiguous problems: a run only
    /// enters classification when its final iterate lies within
    /// `factor·eta` of the nearer of ±θ⋆. `None` disables the gate.
    pub gate_factor: Option<f64>,
}

impl ErrorRateDesign {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("p and N must be positive".into()));
        }
        if self.hp.batch_size > self.n {
            return Err(Error::InvalidArgument(format!(
                "batch size {} exceeds dataset size {}",
                self.hp.batch_size, self.n
            )));
        }
        match self.loss {
            LossKind::Quadratic => match self.noise_sd {
                Some(sd) if sd.is_finite() && sd > 0.0 => {}
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "quadratic designs need a positive noise_sd, got {other:?}"
                    )))
                }
            },
            LossKind::PhaseRetrieval => {}
            LossKind::Logistic => {
                return Err(Error::Unsupported(
                    "error-rate classification needs a computable target minimizer; \
                     logistic models have none"
                        .into(),
                ))
            }
        }
        if let Some(f) = self.gate_factor {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "gate_factor must be positive and finite, got {f}"
                )));
            }
        }
        self.hp.validate()?;
        self.diag.validate()?;
        self.init.validate()?;
        self.crit.validate()
    }
}

/// The four stock error-rate settings: quadratic and phase retrieval,
/// each at low (β = 0.2) and high (β = 0.8) momentum. All run p = 20,
/// N = 1000, batch 20, 20 epochs, with the diagnostic checked every
/// epoch (c = 50).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorRatePreset {
    QuadLow,
    QuadHigh,
    RetrievalLow,
    RetrievalHigh,
}

impl ErrorRatePreset {
    pub fn all() -> [ErrorRatePreset; 4] {
        [
            ErrorRatePreset::QuadLow,
            ErrorRatePreset::QuadHigh,
            ErrorRatePreset::RetrievalLow,
            ErrorRatePreset::RetrievalHigh,
        ]
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorRatePreset::QuadLow => "quad-low",
            ErrorRatePreset::QuadHigh => "quad-high",
            ErrorRatePreset::RetrievalLow => "retrieval-low",
            ErrorRatePreset::RetrievalHigh => "retrieval-high",
        }
    }

    pub fn design(self) -> ErrorRateDesign {
        let (p, n, batch, epochs, c) = (20, 1000, 20, 20, 50);
        match self {
            // Low momentum keeps the statistic's stationary drift
            // negative, so the switch is a formality (β′ = β) gated on
            // the gradient norm falling to 0.6× its first-epoch mean.
            ErrorRatePreset::QuadLow => ErrorRateDesign {
                label: self.label().into(),
                loss: LossKind::Quadratic,
                p,
                n,
                noise_sd: Some(1.0),
                hp: HyperParams {
                    gamma: 1e-2,
                    beta: 0.2,
                    beta_final: 0.0,
                    batch_size: batch,
                    epochs,
                },
                diag: DiagnosticConfig {
                    threshold: ThresholdRule::RelativeToFirst { tau: 0.6 },
                    check_period_c: c,
                    burnin: c,
                    heuristic_kind: crate::diagnostic::HeuristicKind::GradNorm,
                    beta_final: 0.2,
                },
                init: InitKind::Zero,
                crit: ErrorCriteria {
                    eta: 1e-3,
                    kappa: 0.65,
                    reference_run_epochs: epochs,
                    metric: DistanceMetric::PerCoordMse,
                },
                gate_factor: None,
            },
            // High momentum starts far away; the gradient norm saturates
            // at the noise floor σ²p = 20 once the transit ends, so the
            // switch threshold is an absolute level just above it.
            ErrorRatePreset::QuadHigh => ErrorRateDesign {
                label: self.label().into(),
                loss: LossKind::Quadratic,
                p,
                n,
                noise_sd: Some(1.0),
                hp: HyperParams {
                    gamma: 1e-2,
                    beta: 0.8,
                    beta_final: 0.2,
                    batch_size: batch,
                    epochs,
                },
                diag: DiagnosticConfig {
                    threshold: ThresholdRule::Absolute { t: 35.0 },
                    check_period_c: c,
                    burnin: c,
                    heuristic_kind: crate::diagnostic::HeuristicKind::GradNorm,
                    beta_final: 0.2,
                },
                init: InitKind::FarFromOptimum { d0: 1e8 },
                crit: ErrorCriteria {
                    eta: 2e-3,
                    kappa: 0.30,
                    reference_run_epochs: epochs,
                    metric: DistanceMetric::PerCoordMse,
                },
                gate_factor: None,
            },
            // Phase retrieval starts near the saddle at the origin;
            // gradient norms grow through the escape, so the threshold
            // is relative to the running peak.
            ErrorRatePreset::RetrievalLow => ErrorRateDesign {
                label: self.label().into(),
                loss: LossKind::PhaseRetrieval,
                p,
                n,
                noise_sd: None,
                hp: HyperParams {
                    gamma: 0.11,
                    beta: 0.2,
                    beta_final: 0.0,
                    batch_size: batch,
                    epochs,
                },
                diag: DiagnosticConfig {
                    threshold: ThresholdRule::RelativeToPeak { tau: 3e-3 },
                    check_period_c: c,
                    burnin: 12,
                    heuristic_kind: crate::diagnostic::HeuristicKind::GradNorm,
                    beta_final: 0.2,
                },
                init: InitKind::ScaledGaussian { scale: 1e-14 },
                crit: ErrorCriteria {
                    eta: 1e-2,
                    kappa: 0.60,
                    reference_run_epochs: epochs,
                    metric: DistanceMetric::SquaredNorm,
                },
                gate_factor: Some(10.0),
            },
            ErrorRatePreset::RetrievalHigh => ErrorRateDesign {
                label: self.label().into(),
                loss: LossKind::PhaseRetrieval,
                p,
                n,
                noise_sd: None,
                hp: HyperParams {
                    gamma: 0.04,
                    beta: 0.8,
                    beta_final: 0.2,
                    batch_size: batch,
                    epochs,
                },
                diag: DiagnosticConfig {
                    threshold: ThresholdRule::RelativeToPeak { tau: 3e-3 },
                    check_period_c: c,
                    burnin: 12,
                    heuristic_kind: crate::diagnostic::HeuristicKind::GradNorm,
                    beta_final: 0.2,
                },
                init: InitKind::ScaledGaussian { scale: 1e-3 },
                crit: ErrorCriteria {
                    eta: 1e-2,
                    kappa: 0.65,
                    reference_run_epochs: epochs,
                    metric: DistanceMetric::SquaredNorm,
                },
                gate_factor: Some(10.0),
            },
        }
    }
}

/// One run's outcome inside an [`ErrorRateReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunDetail {
    pub run: usize,
    pub status: RunStatus,
    pub activation_iteration: Option<u64>,
    pub dist_at_activation: Option<f64>,
    pub lateness: Option<f64>,
    pub diverged_at: Option<u64>,
}

/// Aggregate of a seeded batch of diagnostic runs. The percentage
/// fields partition the `activated` count; the remaining runs appear in
/// `no_activation_count`, `gate_excluded_count`, and `diverged_count`.
#[derive(Debug, Serialize)]
pub struct ErrorRateReport {
    pub label: String,
    pub runs: usize,
    pub activated: usize,
    pub type1_count: usize,
    pub type2_count: usize,
    pub good_count: usize,
    pub type1_pct: f64,
    pub type2_pct: f64,
    pub good_pct: f64,
    pub no_activation_count: usize,
    pub gate_excluded_count: usize,
    pub diverged_count: usize,
    pub details: Vec<RunDetail>,
    /// Per-run traces, index-aligned with `details` (not serialized;
    /// persisted separately as CSV when requested).
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

/// Run `runs` independent seeded diagnostic runs of `design` and
/// classify each against its own dataset's minimizer (least-squares
/// solution for the quadratic, the nearer of ±θ⋆ for phase retrieval).
///
/// Run i draws everything — dataset, starting point, batches — from
/// `rng.substream(i)`, so the report is reproducible to the bit and
/// independent of the worker count. Divergences and gate exclusions are
/// reported in the counts, not as errors.
pub fn error_rate_experiment(
    design: &ErrorRateDesign,
    runs: usize,
    rng: &RngStream,
) -> Result<ErrorRateReport> {
    design.validate()?;
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }

    let outcomes: Vec<(RunDetail, RunRecord)> = (0..runs)
        .into_par_iter()
        .map(|i| error_rate_run(design, i, rng.substream(i as u64)))
        .collect::<Result<Vec<_>>>()?;

    let (details, records): (Vec<RunDetail>, Vec<RunRecord>) = outcomes.into_iter().unzip();
    let count = |s: RunStatus| details.iter().filter(|d| d.status == s).count();
    let (t1, t2, good) = (
        count(RunStatus::Type1),
        count(RunStatus::Type2),
        count(RunStatus::Good),
    );
    let activated = t1 + t2 + good;
    let pct = |c: usize| {
        if activated == 0 {
            0.0
        } else {
            100.0 * c as f64 / activated as f64
        }
    };
    Ok(ErrorRateReport {
        label: design.label.clone(),
        runs,
        activated,
        type1_count: t1,
        type2_count: t2,
        good_count: good,
        type1_pct: pct(t1),
        type2_pct: pct(t2),
        good_pct: pct(good),
        no_activation_count: count(RunStatus::NoActivation),
        gate_excluded_count: count(RunStatus::GateExcluded),
        diverged_count: count(RunStatus::Diverged),
        details,
        records,
    })
}

fn error_rate_run(
    design: &ErrorRateDesign,
    idx: usize,
    mut stream: RngStream,
) -> Result<(RunDetail, RunRecord)> {
    let dataset = match design.loss {
        LossKind::Quadratic => gen_quadratic(
            design.p,
            design.n,
            design.noise_sd.expect("validated"),
            &mut stream,
        )?,
        LossKind::PhaseRetrieval => gen_phase_retrieval(design.p, design.n, &mut stream)?,
        LossKind::Logistic => unreachable!("rejected by validate"),
    };
    let optimum = dataset.optimum.clone().expect("synthetic dataset");
    let target = match design.loss {
        LossKind::Quadratic => dataset.least_squares_solution()?,
        _ => optimum.clone(),
    };
    let theta0 = design.init.sample(&optimum, design.p, &mut stream)?;
    let model = LossModel::new(design.loss, dataset);

    let run = run_with_diagnostic(
        &model,
        design.hp,
        &design.diag,
        theta0,
        &mut stream,
        design.crit.reference_run_epochs,
    )?;

    let base = RunDetail {
        run: idx,
        status: RunStatus::NoActivation,
        activation_iteration: run.record.events().diagnostic_activation_at,
        dist_at_activation: None,
        lateness: None,
        diverged_at: None,
    };
    if let RunOutcome::Diverged { at, .. } = run.outcome {
        let mut record = run.record;
        record.discard_thetas();
        return Ok((
            RunDetail {
                status: RunStatus::Diverged,
                diverged_at: Some(at),
                ..base
            },
            record,
        ));
    }

    // Sign-ambiguous losses are classified against the nearer of ±θ⋆,
    // but only when the run actually reached one of them.
    let target = if design.gate_factor.is_some() || design.loss == LossKind::PhaseRetrieval {
        let final_theta = run
            .record
            .thetas()
            .last()
            .expect("synthetic runs record iterates");
        let d_pos = design.crit.metric.value(final_theta, &target)?;
        let neg = target.scale(-1.0);
        let d_neg = design.crit.metric.value(final_theta, &neg)?;
        let (matched, d_min) = if d_neg < d_pos { (neg, d_neg) } else { (target, d_pos) };
        if let Some(factor) = design.gate_factor {
            if d_min > factor * design.crit.eta {
                let mut record = run.record;
                record.discard_thetas();
                return Ok((
                    RunDetail {
                        status: RunStatus::GateExcluded,
                        ..base
                    },
                    record,
                ));
            }
        }
        matched
    } else {
        target
    };

    let cls = classify_run_detailed(&run.record, &target, &design.crit)?;
    let mut record = run.record;
    record.discard_thetas();
    Ok((
        RunDetail {
            status: cls.class.into(),
            activation_iteration: cls.activation_iteration,
            dist_at_activation: cls.dist_at_activation,
            lateness: cls.lateness,
            ..base
        },
        record,
    ))
}

/// Recompute η and κ for a custom design from reference runs: η is the
/// 95th percentile of the stationary squared distance to the target
/// over `calibration_runs` switch-disabled runs at the reduced momentum
/// β′, and κ is the 95th percentile of the end-of-run lateness those
/// runs would score at that η (clamped into [0.05, 0.95]).
pub fn calibrate_criteria(
    design: &ErrorRateDesign,
    calibration_runs: usize,
    rng: &RngStream,
) -> Result<ErrorCriteria> {
    design.validate()?;
    if calibration_runs < 3 {
        return Err(Error::InvalidArgument(
            "calibration needs at least 3 runs".into(),
        ));
    }
    let mut hp = design.hp;
    hp.beta = design.diag.beta_final;
    hp.beta_final = 0.0;
    let cfg = DiagnosticConfig {
        threshold: ThresholdRule::Absolute { t: 0.0 },
        ..design.diag
    };
    let reference = ErrorRateDesign {
        hp,
        diag: cfg,
        gate_factor: None,
        ..design.clone()
    };

    struct CalRun {
        record: RunRecord,
        target: ParamVector,
        window: Range<usize>,
    }
    let runs: Vec<Option<CalRun>> = (0..calibration_runs)
        .into_par_iter()
        .map(|i| -> Result<Option<CalRun>> {
            let mut stream = rng.substream(i as u64);
            let dataset = match reference.loss {
                LossKind::Quadratic => gen_quadratic(
                    reference.p,
                    reference.n,
                    reference.noise_sd.expect("validated"),
                    &mut stream,
                )?,
                LossKind::PhaseRetrieval => {
                    gen_phase_retrieval(reference.p, reference.n, &mut stream)?
                }
                LossKind::Logistic => unreachable!("rejected by validate"),
            };
            let optimum = dataset.optimum.clone().expect("synthetic dataset");
            let target = match reference.loss {
                LossKind::Quadratic => dataset.least_squares_solution()?,
                _ => optimum.clone(),
            };
            let theta0 = reference.init.sample(&optimum, reference.p, &mut stream)?;
            let model = LossModel::new(reference.loss, dataset);
            let run = run_with_diagnostic(
                &model,
                reference.hp,
                &reference.diag,
                theta0,
                &mut stream,
                reference.crit.reference_run_epochs,
            )?;
            if matches!(run.outcome, RunOutcome::Diverged { .. }) {
                return Ok(None);
            }
            let window = stationary_window(&run.record)?;
            let target = match reference.loss {
                LossKind::PhaseRetrieval => {
                    let final_theta = run.record.thetas().last().expect("recorded");
                    let neg = target.scale(-1.0);
                    if final_theta.dist_sq(&neg)? < final_theta.dist_sq(&target)? {
                        neg
                    } else {
                        target
                    }
                }
                _ => target,
            };
            Ok(Some(CalRun {
                record: run.record,
                target,
                window,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<CalRun> = runs.into_iter().flatten().collect();
    if runs.is_empty() {
        return Err(Error::DegenerateInput(
            "every calibration run diverged".into(),
        ));
    }

    let mut stationary_dists = Vec::new();
    for r in &runs {
        let thetas = r.record.thetas();
        for i in r.window.clone() {
            stationary_dists.push(design.crit.metric.value(&thetas[i + 1], &r.target)?);
        }
    }
    stationary_dists.sort_by(|a, b| a.total_cmp(b));
    let eta = percentile_sorted(&stationary_dists, 0.95);
    if !(eta > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "calibrated eta is not positive: {eta}"
        )));
    }

    let mut latenesses = Vec::new();
    for r in &runs {
        let thetas = r.record.thetas();
        let n = thetas.len() - 1;
        let theta_n = &thetas[n];
        let mut k = 0usize;
        for j in (0..=n).rev() {
            if design.crit.metric.value(&thetas[j], theta_n)? >= eta {
                k = j;
                break;
            }
        }
        latenesses.push((n - k) as f64 / n as f64);
    }
    latenesses.sort_by(|a, b| a.total_cmp(b));
    let kappa = percentile_sorted(&latenesses, 0.95).clamp(0.05, 0.95);

    Ok(ErrorCriteria {
        eta,
        kappa,
        ..design.crit
    })
}

// ---------------------------------------------------------------------
// Inner-product distributions
// ---------------------------------------------------------------------

/// Which side of the transient/stationary boundary to analyze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Transient,
    Stationary,
}

/// How the phase boundary is located in a record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SplitRule {
    /// Start of the earliest trailing window over which the
    /// least-squares slope of ‖θ − θ⋆‖² is within two standard errors
    /// of zero.
    DistanceSlope { window: usize },
    /// First iteration with ‖θ − θ⋆‖² below `eta`.
    DistanceBelow { eta: f64 },
    /// Split at a known row index.
    Fixed { boundary: usize },
}

/// Locate the stationary-phase boundary: the row index at which the
/// stationary phase begins under the given rule.
pub fn phase_boundary(record: &RunRecord, rule: SplitRule) -> Result<usize> {
    let rows = record.rows();
    match rule {
        SplitRule::Fixed { boundary } => {
            if boundary > rows.len() {
                return Err(Error::InvalidArgument(format!(
                    "fixed boundary {boundary} beyond {} rows",
                    rows.len()
                )));
            }
            Ok(boundary)
        }
        SplitRule::DistanceBelow { eta } => {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "eta must be positive and finite, got {eta}"
                )));
            }
            let dists = distance_series(record)?;
            dists.iter().position(|&d| d < eta).ok_or_else(|| {
                Error::InsufficientData(format!(
                    "squared distance never fell below {eta}; the run has no stationary phase"
                ))
            })
        }
        SplitRule::DistanceSlope { window } => {
            if window < 3 {
                return Err(Error::InvalidArgument(
                    "slope window must be >= 3".into(),
                ));
            }
            let dists = distance_series(record)?;
            if dists.len() < window {
                return Err(Error::InsufficientData(format!(
                    "{} rows cannot hold a slope window of {window}",
                    dists.len()
                )));
            }
            for end in window - 1..dists.len() {
                let start = end + 1 - window;
                let (slope, se) = least_squares_slope(&dists[start..=end])?;
                if slope.abs() <= 2.0 * se {
                    return Ok(start);
                }
            }
            Err(Error::InsufficientData(
                "the squared-distance slope never flattened; the run has no stationary phase"
                    .into(),
            ))
        }
    }
}

fn distance_series(record: &RunRecord) -> Result<Vec<f64>> {
    record
        .rows()
        .iter()
        .map(|r| {
            r.dist_to_optimum_sq.ok_or_else(|| {
                Error::Unsupported(
                    "phase splitting needs per-row distances, which this record does not carry"
                        .into(),
                )
            })
        })
        .collect()
}

/// True for rows whose inner product and cosine are placeholders: the
/// first iteration of the run and the first iteration after each rate
/// reduction, where there is no previous gradient to compare against.
fn placeholder_row(record: &RunRecord, idx: usize) -> bool {
    if idx == 0 {
        return true;
    }
    let it = record.rows()[idx].iteration;
    record
        .events()
        .lr_reductions
        .iter()
        .any(|&r| r + 1 == it)
}

/// Shape statistics of the per-iteration gradient inner products over
/// one phase of a run.
#[derive(Debug, Clone, Serialize)]
pub struct DistributionStats {
    /// Row index where the stationary phase begins.
    pub boundary: usize,
    pub n_samples: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// Population skewness m₃/m₂^{3/2}.
    pub skewness: f64,
    /// `bin_edges.len() == counts.len() + 1`; counts sum to `n_samples`.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Fraction of samples below mean − 3·sd.
    pub tail_mass_below_3sd: f64,
    /// (‖∇ℓ‖², cos(∇ℓₙ, ∇ℓₙ₋₁)) pairs for the same rows.
    pub scatter: Vec<(f64, f64)>,
}

/// Distribution of the successive-gradient inner products over the
/// requested phase. Rows without a predecessor gradient are skipped;
/// fewer than 100 usable samples is an error.
pub fn ip_distribution(
    record: &RunRecord,
    phase: Phase,
    rule: SplitRule,
) -> Result<DistributionStats> {
    let boundary = phase_boundary(record, rule)?;
    let rows = record.rows();
    let range = match phase {
        Phase::Transient => 0..boundary,
        Phase::Stationary => boundary..rows.len(),
    };

    let mut ips = Vec::new();
    let mut scatter = Vec::new();
    for i in range {
        if placeholder_row(record, i) {
            continue;
        }
        ips.push(rows[i].inner_product);
        scatter.push((rows[i].grad_norm_sq, rows[i].cosine_prev));
    }
    if ips.len() < MIN_PHASE_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} inner products in the {phase:?} phase; need {MIN_PHASE_SAMPLES}",
            ips.len()
        )));
    }

    let n = ips.len() as f64;
    let mean = ips.iter().sum::<f64>() / n;
    let m2 = ips.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = ips.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let variance = m2 * n / (n - 1.0);
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let cutoff = mean - 3.0 * m2.sqrt();
    let tail = ips.iter().filter(|&&x| x < cutoff).count() as f64 / n;
    let (bin_edges, counts) = histogram(&ips, HISTOGRAM_BINS);

    Ok(DistributionStats {
        boundary,
        n_samples: ips.len(),
        mean,
        variance,
        skewness,
        bin_edges,
        counts,
        tail_mass_below_3sd: tail,
        scatter,
    })
}

fn histogram(samples: &[f64], bins: usize) -> (Vec<f64>, Vec<u64>) {
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return (vec![min - 0.5, min + 0.5], vec![samples.len() as u64]);
    }
    let width = (max - min) / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|k| min + k as f64 * width).collect();
    edges[bins] = max;
    let mut counts = vec![0u64; bins];
    for &x in samples {
        let k = (((x - min) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    (edges, counts)
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Mean successive-gradient inner product over the record's stationary
/// window (the trailing quarter, accepted once its loss slope is flat).
pub fn stationary_ip_mean(record: &RunRecord) -> Result<f64> {
    let window = stationary_window(record)?;
    let rows = record.rows();
    let mut sum = KahanSum::new();
    let mut count = 0usize;
    for i in window {
        if placeholder_row(record, i) {
            continue;
        }
        sum.add(rows[i].inner_product);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InsufficientData(
            "stationary window holds no usable inner products".into(),
        ));
    }
    Ok(sum.value() / count as f64)
}

/// Scatter data for spotting the sparse large-magnitude negative inner
/// products that drive the statistic down at stationarity.
#[derive(Debug, Clone, Serialize)]
pub struct KeyIterateScatter {
    /// (‖∇ℓ‖², cos(∇ℓₙ, ∇ℓₙ₋₁)) pairs over the window.
    pub pairs: Vec<(f64, f64)>,
    /// 95th percentile of the window's squared gradient norms.
    pub p95_grad_norm_sq: f64,
    /// Points with negative cosine and a squared norm above that
    /// percentile.
    pub key_count: usize,
}

/// Collect (norm, cosine) pairs over a window of row indices and count
/// the key points: cosine < 0 with squared gradient norm above the
/// window's 95th percentile.
pub fn key_iterate_scatter(record: &RunRecord, window: Range<usize>) -> Result<KeyIterateScatter> {
    let rows = record.rows();
    if window.end > rows.len() || window.start >= window.end {
        return Err(Error::InvalidArgument(format!(
            "window {window:?} out of bounds for {} rows",
            rows.len()
        )));
    }
    let mut pairs = Vec::new();
    for i in window {
        if placeholder_row(record, i) {
            continue;
        }
        pairs.push((rows[i].grad_norm_sq, rows[i].cosine_prev));
    }
    if pairs.len() < MIN_PHASE_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} usable rows in the window; need {MIN_PHASE_SAMPLES}",
            pairs.len()
        )));
    }
    let mut norms: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    norms.sort_by(|a, b| a.total_cmp(b));
    let p95 = percentile_sorted(&norms, 0.95);
    let key_count = pairs
        .iter()
        .filter(|(norm, cos)| *cos < 0.0 && *norm > p95)
        .count();
    Ok(KeyIterateScatter {
        pairs,
        p95_grad_norm_sq: p95,
        key_count,
    })
}

// ---------------------------------------------------------------------
// Statistic-trace ablation
// ---------------------------------------------------------------------

/// The running statistic of one ablation run at a fixed momentum.
#[derive(Debug, Clone, Serialize)]
pub struct AblationTrace {
    pub beta: f64,
    /// (iteration, S) samples. With the reduction enabled this is the
    /// live statistic; with it disabled, the sum the statistic would
    /// accumulate from the post-burn-in inner products.
    pub trace: Vec<(u64, f64)>,
    /// Least-squares slope and its standard error over the trace's second
    /// half; `None` when the trace is too short to fit.
    pub late_slope: Option<(f64, f64)>,
    pub outcome: RunOutcome,
}

/// Train once per β from identical substreams and report each run's
/// statistic trace with a late-window slope fit.
///
/// With `momentum_reduction` disabled the switch can never fire
/// (absolute threshold 0), the run uses constant momentum for its whole
/// budget, and the trace is the post-hoc accumulation of the recorded
/// inner products after one burn-in; enabled, the runs use `cfg` as
/// given and the trace is the live statistic, ending where the
/// diagnostic stops the run.
pub fn statistic_trace_ablation(
    model: &LossModel,
    betas: &[f64],
    momentum_reduction: bool,
    hp: HyperParams,
    cfg: &DiagnosticConfig,
    theta0: &ParamVector,
    rng: &RngStream,
) -> Result<Vec<AblationTrace>> {
    cfg.validate()?;
    betas
        .par_iter()
        .map(|&beta| -> Result<AblationTrace> {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidArgument(format!(
                    "beta must be in [0, 1), got {beta}"
                )));
            }
            let mut hp_b = hp;
            hp_b.beta = beta;
            hp_b.beta_final = 0.0;
            let cfg_eff = if momentum_reduction {
                *cfg
            } else {
                DiagnosticConfig {
                    threshold: ThresholdRule::Absolute { t: 0.0 },
                    ..*cfg
                }
            };
            let mut stream = rng.clone();
            let run = run_with_diagnostic(
                model,
                hp_b,
                &cfg_eff,
                theta0.clone(),
                &mut stream,
                hp_b.epochs,
            )?;
            let rows = run.record.rows();

            let trace: Vec<(u64, f64)> = if momentum_reduction {
                let fit_from = run
                    .record
                    .events()
                    .momentum_switch_at
                    .map_or(0, |s| (s as usize + cfg.burnin).min(rows.len()));
                rows[fit_from..]
                    .iter()
                    .map(|r| (r.iteration, r.statistic_s))
                    .collect()
            } else {
                let mut s = KahanSum::new();
                rows.iter()
                    .skip(cfg.burnin)
                    .map(|r| {
                        s.add(r.inner_product);
                        (r.iteration, s.value())
                    })
                    .collect()
            };

            let half = trace.len() / 2;
            let late_slope = if trace.len() - half >= 3 {
                let vals: Vec<f64> = trace[half..].iter().map(|&(_, s)| s).collect();
                Some(least_squares_slope(&vals)?)
            } else {
                None
            };
            Ok(AblationTrace {
                beta,
                trace,
                late_slope,
                outcome: run.outcome,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------
// Learning-rate robustness sweeps
// ---------------------------------------------------------------------

/// Which schedule the sweep runs at each γ₀.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// The diagnostic-driven decay schedule.
    Auto,
    /// The γₙ = γ₀/n comparison schedule, run for the same total epoch
    /// budget the staged schedule would get.
    Decreasing,
}

/// One γ₀ column of a sweep table.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub gamma0: f64,
    /// Held-out classification accuracy; `None` when the run diverged.
    pub accuracy: Option<f64>,
    pub diverged_at: Option<u64>,
    /// Constant-rate stages completed (0 in decreasing mode).
    pub stages_run: usize,
    pub iterations: u64,
    pub warnings: Vec<String>,
}

/// Final accuracies across a list of initial learning rates.
#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub mode: SweepMode,
    pub cells: Vec<SweepCell>,
}

/// Fraction of examples whose label matches the sign of x⊤θ.
pub fn classification_accuracy(theta: &ParamVector, data: &Dataset) -> Result<f64> {
    if theta.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: theta.dim(),
        });
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let z: f64 = data
                .x(i)
                .iter()
                .zip(theta.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            (sigmoid(z) >= 0.5) == (data.y(i) > 0.5)
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Train once per γ₀ under the chosen schedule and report held-out
/// accuracy. Cell i draws from `rng.substream(i)`, so running both
/// modes from the same parent pairs them on identical data orderings.
/// Decreasing-mode cells get the same epoch budget the staged schedule
/// would: stages × stage_max_epochs. Divergent cells are marked and the
/// table is still produced.
pub fn robustness_sweep(
    model: &LossModel,
    gamma0s: &[f64],
    mode: SweepMode,
    base: &ScheduleConfig,
    theta0: &ParamVector,
    rng: &RngStream,
    eval: &Dataset,
) -> Result<SweepTable> {
    if model.kind != LossKind::Logistic {
        return Err(Error::Unsupported(
            "accuracy sweeps need a classification model".into(),
        ));
    }
    if eval.dim() != model.dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dataset.dim(),
            got: eval.dim(),
        });
    }
    base.validate()?;
    if gamma0s.is_empty() {
        return Err(Error::InvalidArgument("gamma0s must be non-empty".into()));
    }
    let min_ratio = base.gamma_min / base.gamma0;

    let cells: Vec<SweepCell> = gamma0s
        .par_iter()
        .enumerate()
        .map(|(i, &gamma0)| -> Result<SweepCell> {
            if !(gamma0.is_finite() && gamma0 > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "gamma0 must be positive and finite, got {gamma0}"
                )));
            }
            let mut cfg = base.clone();
            cfg.gamma0 = gamma0;
            cfg.gamma_min = gamma0 * min_ratio;
            cfg.hp.gamma = gamma0;
            let mut stream = rng.substream(i as u64);

            match mode {
                SweepMode::Auto => {
                    let trace = auto_lr(model, &cfg, theta0.clone(), &mut stream)?;
                    let accuracy = match trace.diverged {
                        Some(_) => None,
                        None => Some(classification_accuracy(&trace.final_theta, eval)?),
                    };
                    Ok(SweepCell {
                        gamma0,
                        accuracy,
                        diverged_at: trace.diverged.as_ref().map(|&(at, _)| at),
                        stages_run: trace.stages.len(),
                        iterations: trace.record.len() as u64,
                        warnings: trace.warnings,
                    })
                }
                SweepMode::Decreasing => {
                    let epochs = stage_count(&cfg) * cfg.stage_max_epochs;
                    let run = decreasing_lr_baseline(
                        model,
                        gamma0,
                        cfg.hp,
                        theta0.clone(),
                        epochs.max(1),
                        &mut stream,
                    )?;
                    let accuracy = match (&run.diverged, &run.final_theta) {
                        (None, Some(theta)) => Some(classification_accuracy(theta, eval)?),
                        _ => None,
                    };
                    Ok(SweepCell {
                        gamma0,
                        accuracy,
                        diverged_at: run.diverged.as_ref().map(|&(at, _)| at),
                        stages_run: 0,
                        iterations: run.record.len() as u64,
                        warnings: Vec::new(),
                    })
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SweepTable { mode, cells })
}

/// Number of constant-rate stages the staged schedule runs before γ
/// reaches its floor.
fn stage_count(cfg: &ScheduleConfig) -> usize {
    let mut k: i32 = 0;
    while cfg.gamma0 * cfg.rho.powi(k) > cfg.gamma_min * (1.0 + 1e-9) {
        k += 1;
        if k > 10_000 {
            break;
        }
    }
    k as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostic::HeuristicKind;
    use crate::problems::gen_logistic;
    use crate::record::RecordRow;

    fn crit(eta: f64, kappa: f64, metric: DistanceMetric) -> ErrorCriteria {
        ErrorCriteria {
            eta,
            kappa,
            reference_run_epochs: 20,
            metric,
        }
    }

    fn pv1(v: f64) -> ParamVector {
        ParamVector::new(vec![v]).unwrap()
    }

    /// A record whose iterate trajectory is given explicitly; rows are
    /// filled with matching placeholder data.
    fn record_from_thetas(thetas: &[f64], activation: Option<u64>) -> RunRecord {
        let mut rec = RunRecord::new();
        rec.push_theta(pv1(thetas[0]));
        for (i, &t) in thetas.iter().enumerate().skip(1) {
            rec.push_row(RecordRow {
                iteration: i as u64,
                inner_product: 0.0,
                statistic_s: 0.0,
                loss_estimate: 0.0,
                dist_to_optimum_sq: Some(t * t),
                grad_norm_sq: 1.0,
                cosine_prev: 0.0,
                gamma_in_effect: 0.01,
                beta_in_effect: 0.2,
            })
            .unwrap();
            rec.push_theta(pv1(t));
        }
        if let Some(n) = activation {
            rec.mark_activation(n);
        }
        rec
    }

    #[test]
    fn classify_type1_when_activation_lands_far() {
        // Activation at θ₄ = 2, target 0: distance 4 > η.
        let rec = record_from_thetas(&[10.0, 8.0, 6.0, 4.0, 2.0], Some(4));
        let c = crit(0.5, 0.65, DistanceMetric::SquaredNorm);
        let cls = classify_run_detailed(&rec, &pv1(0.0), &c).unwrap();
        assert_eq!(cls.class, RunClass::Type1);
        assert_eq!(cls.dist_at_activation, Some(4.0));
        assert_eq!(cls.lateness, None);
    }

    #[test]
    fn classify_type2_when_crossing_is_early() {
        // θ settles at 0 from iteration 2 on; activation waits till 10.
        let mut thetas = vec![10.0, 5.0];
        thetas.extend(std::iter::repeat(0.0).take(9));
        let rec = record_from_thetas(&thetas, Some(10));
        let c = crit(1.0, 0.65, DistanceMetric::SquaredNorm);
        let cls = classify_run_detailed(&rec, &pv1(0.0), &c).unwrap();
        // k = 1 (last iterate ≥ η from θ₁₀), K = 9/10.
        assert_eq!(cls.class, RunClass::Type2);
        assert_eq!(cls.lateness, Some(0.9));
    }

    #[test]
    fn classify_good_when_crossing_is_recent() {
        // Crossing at k = 8 of n = 10: K = 0.2 below κ.
        let thetas = vec![10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 0.1, 0.0];
        let rec = record_from_thetas(&thetas, Some(10));
        let c = crit(1.0, 0.65, DistanceMetric::SquaredNorm);
        let cls = classify_run_detailed(&rec, &pv1(0.0), &c).unwrap();
        assert_eq!(cls.class, RunClass::Good);
        assert_eq!(cls.lateness, Some(0.2));
    }

    #[test]
    fn classify_no_activation_without_event() {
        let rec = record_from_thetas(&[1.0, 0.5, 0.0], None);
        let c = crit(1.0, 0.5, DistanceMetric::SquaredNorm);
        assert_eq!(
            classify_run(&rec, &pv1(0.0), &c).unwrap(),
            RunClass::NoActivation
        );
    }

    #[test]
    fn classify_requires_trajectory() {
        let mut rec = record_from_thetas(&[1.0, 0.0], Some(1));
        rec.discard_thetas();
        let c = crit(1.0, 0.5, DistanceMetric::SquaredNorm);
        let e = classify_run(&rec, &pv1(0.0), &c).unwrap_err();
        assert!(matches!(e, Error::Unsupported(_)), "{e}");
    }

    #[test]
    fn backward_scan_defaults_to_k_zero() {
        // Every iterate within η of θₙ: the whole run counts as late.
        let rec = record_from_thetas(&[0.1, 0.1, 0.1, 0.1], Some(3));
        let c = crit(1.0, 0.9, DistanceMetric::SquaredNorm);
        let cls = classify_run_detailed(&rec, &pv1(0.0), &c).unwrap();
        assert_eq!(cls.lateness, Some(1.0));
        assert_eq!(cls.class, RunClass::Type2);
    }

    #[test]
    fn per_coord_metric_divides_by_dimension() {
        let a = ParamVector::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let b = ParamVector::zeros(4);
        assert_eq!(DistanceMetric::SquaredNorm.value(&a, &b).unwrap(), 4.0);
        assert_eq!(DistanceMetric::PerCoordMse.value(&a, &b).unwrap(), 1.0);
    }

    /// A long constant-momentum run on the synthetic quadratic with the
    /// switch disabled: stationary from roughly iteration 200 on.
    fn reference_quadratic_run(seed: u64, beta: f64, epochs: usize) -> RunRecord {
        let mut rng = RngStream::new(seed, 0);
        let data = gen_quadratic(20, 1000, 1.0, &mut rng).unwrap();
        let model = LossModel::new(LossKind::Quadratic, data);
        let hp = HyperParams::new(1e-2, beta, 0.0, 20, epochs).unwrap();
        let cfg = DiagnosticConfig {
            threshold: ThresholdRule::Absolute { t: 0.0 },
            check_period_c: 50,
            burnin: 50,
            heuristic_kind: HeuristicKind::GradNorm,
            beta_final: 0.0,
        };
        run_with_diagnostic(&model, hp, &cfg, ParamVector::zeros(20), &mut rng, epochs)
            .unwrap()
            .record
    }

    #[test]
    fn slope_and_eta_splits_agree_on_reference_run() {
        let rec = reference_quadratic_run(17, 0.2, 20);
        let b_slope = phase_boundary(&rec, SplitRule::DistanceSlope { window: 50 }).unwrap();
        // η at twice the settled level: the final quarter's mean.
        let rows = rec.rows();
        let settled: f64 = rows[750..]
            .iter()
            .map(|r| r.dist_to_optimum_sq.unwrap())
            .sum::<f64>()
            / 250.0;
        let b_eta =
            phase_boundary(&rec, SplitRule::DistanceBelow { eta: 2.0 * settled }).unwrap();
        let agreement = 1.0 - (b_slope as f64 - b_eta as f64).abs() / rows.len() as f64;
        assert!(
            agreement >= 0.8,
            "boundaries {b_slope} vs {b_eta} agree on {agreement:.2} of rows"
        );
    }

    #[test]
    fn ip_distribution_histogram_partitions_samples() {
        let rec = reference_quadratic_run(18, 0.2, 20);
        let stats = ip_distribution(
            &rec,
            Phase::Stationary,
            SplitRule::DistanceSlope { window: 50 },
        )
        .unwrap();
        assert!(stats.n_samples >= MIN_PHASE_SAMPLES);
        assert_eq!(stats.counts.iter().sum::<u64>(), stats.n_samples as u64);
        assert_eq!(stats.bin_edges.len(), stats.counts.len() + 1);
        assert_eq!(stats.scatter.len(), stats.n_samples);
        assert!(stats.variance > 0.0);
        assert!((0.0..=1.0).contains(&stats.tail_mass_below_3sd));
    }

    #[test]
    fn transient_mean_positive_and_stationary_skew_negative_at_low_beta() {
        let rec = reference_quadratic_run(19, 0.2, 20);
        let rule = SplitRule::DistanceSlope { window: 50 };
        let transient = ip_distribution(&rec, Phase::Transient, rule).unwrap();
        assert!(transient.mean > 0.0, "transient mean {}", transient.mean);
        let stationary = ip_distribution(&rec, Phase::Stationary, rule).unwrap();
        assert!(
            stationary.skewness < 0.0,
            "stationary skewness {}",
            stationary.skewness
        );
    }

    #[test]
    fn stationary_ip_mean_flips_sign_with_momentum() {
        let low = stationary_ip_mean(&reference_quadratic_run(22, 0.2, 20)).unwrap();
        let high = stationary_ip_mean(&reference_quadratic_run(22, 0.8, 20)).unwrap();
        assert!(low < 0.0, "low-momentum stationary mean {low}");
        assert!(high > 0.0, "high-momentum stationary mean {high}");
    }

    #[test]
    fn ip_distribution_needs_enough_samples() {
        let rec = reference_quadratic_run(20, 0.2, 20);
        let n = rec.len();
        let e = ip_distribution(
            &rec,
            Phase::Stationary,
            SplitRule::Fixed { boundary: n - 50 },
        )
        .unwrap_err();
        assert!(matches!(e, Error::InsufficientData(_)), "{e}");
    }

    #[test]
    fn key_iterates_present_at_low_beta_stationarity() {
        let rec = reference_quadratic_run(21, 0.2, 20);
        let n = rec.len();
        let scatter = key_iterate_scatter(&rec, n - 500..n).unwrap();
        assert!(scatter.key_count >= 1, "no key iterates found");
        assert!(scatter.pairs.len() >= MIN_PHASE_SAMPLES);
        let e = key_iterate_scatter(&rec, n - 50..n).unwrap_err();
        assert!(matches!(e, Error::InsufficientData(_)), "{e}");
    }

    #[test]
    fn key_iterates_zero_when_gradients_align() {
        // All cosines positive: nothing can be a key point.
        let mut rec = RunRecord::new();
        for i in 1..=200u64 {
            rec.push_row(RecordRow {
                iteration: i,
                inner_product: 1.0,
                statistic_s: 0.0,
                loss_estimate: 0.0,
                dist_to_optimum_sq: None,
                grad_norm_sq: 1.0 + (i % 7) as f64,
                cosine_prev: 0.9,
                gamma_in_effect: 0.01,
                beta_in_effect: 0.2,
            })
            .unwrap();
        }
        let scatter = key_iterate_scatter(&rec, 0..200).unwrap();
        assert_eq!(scatter.key_count, 0);
    }

    #[test]
    fn preset_designs_validate_and_pin_expected_values() {
        for preset in ErrorRatePreset::all() {
            let d = preset.design();
            d.validate().unwrap();
            assert_eq!(d.p, 20);
            assert_eq!(d.n, 1000);
            assert_eq!(d.hp.batch_size, 20);
            assert_eq!(d.diag.check_period_c, 50);
        }
        let qlow = ErrorRatePreset::QuadLow.design();
        assert_eq!(qlow.crit.eta, 1e-3);
        assert_eq!(qlow.crit.kappa, 0.65);
        assert_eq!(qlow.crit.metric, DistanceMetric::PerCoordMse);
        let rhigh = ErrorRatePreset::RetrievalHigh.design();
        assert_eq!(rhigh.hp.gamma, 0.04);
        assert_eq!(rhigh.gate_factor, Some(10.0));
        assert_eq!(rhigh.crit.metric, DistanceMetric::SquaredNorm);
    }

    #[test]
    fn single_run_report_has_degenerate_percentages() {
        let design = ErrorRatePreset::QuadLow.design();
        let report = error_rate_experiment(&design, 1, &RngStream::new(3, 0)).unwrap();
        assert_eq!(report.runs, 1);
        assert_eq!(report.details.len(), 1);
        assert_eq!(report.records.len(), 1);
        for pct in [report.type1_pct, report.type2_pct, report.good_pct] {
            assert!(pct == 0.0 || pct == 100.0, "{pct}");
        }
    }

    #[test]
    fn error_rate_report_partitions_runs_and_replays() {
        let design = ErrorRatePreset::QuadLow.design();
        let rng = RngStream::new(41, 0);
        let report = error_rate_experiment(&design, 12, &rng).unwrap();
        assert_eq!(
            report.type1_count + report.type2_count + report.good_count,
            report.activated
        );
        assert_eq!(
            report.activated
                + report.no_activation_count
                + report.gate_excluded_count
                + report.diverged_count,
            report.runs
        );
        if report.activated > 0 {
            let total = report.type1_pct + report.type2_pct + report.good_pct;
            assert!((total - 100.0).abs() < 1e-9, "{total}");
        }
        let again = error_rate_experiment(&design, 12, &rng).unwrap();
        assert_eq!(report.details, again.details);
    }

    #[test]
    fn retrieval_runs_classify_against_matched_sign() {
        let design = ErrorRatePreset::RetrievalLow.design();
        let report = error_rate_experiment(&design, 4, &RngStream::new(7, 0)).unwrap();
        assert_eq!(report.details.len(), 4);
        // Whatever the classes, every activated run carries its
        // decision quantities.
        for d in &report.details {
            if matches!(d.status, RunStatus::Type1 | RunStatus::Type2 | RunStatus::Good) {
                assert!(d.activation_iteration.is_some());
                assert!(d.dist_at_activation.is_some());
            }
        }
    }

    #[test]
    fn calibration_recovers_plausible_criteria() {
        let mut design = ErrorRatePreset::QuadLow.design();
        design.crit.eta = 1.0;
        design.crit.kappa = 0.5;
        let crit = calibrate_criteria(&design, 4, &RngStream::new(23, 0)).unwrap();
        // Stationary per-coordinate error sits far below 1 and above
        // the noiseless floor.
        assert!(crit.eta > 0.0 && crit.eta < 1e-2, "eta {}", crit.eta);
        assert!((0.05..=0.95).contains(&crit.kappa), "kappa {}", crit.kappa);
        let again = calibrate_criteria(&design, 4, &RngStream::new(23, 0)).unwrap();
        assert_eq!(crit, again);
    }

    #[test]
    fn ablation_traces_are_deterministic_and_fit_slopes() {
        let mut rng = RngStream::new(29, 0);
        let data = gen_quadratic(5, 200, 1.0, &mut rng).unwrap();
        let model = LossModel::new(LossKind::Quadratic, data);
        let hp = HyperParams::new(1e-2, 0.2, 0.0, 10, 10).unwrap();
        let cfg = DiagnosticConfig {
            threshold: ThresholdRule::RelativeToFirst { tau: 0.5 },
            check_period_c: 20,
            burnin: 20,
            heuristic_kind: HeuristicKind::GradNorm,
            beta_final: 0.0,
        };
        let theta0 = ParamVector::zeros(5);
        let betas = [0.0, 0.5];
        let parent = RngStream::new(31, 0);
        let traces =
            statistic_trace_ablation(&model, &betas, false, hp, &cfg, &theta0, &parent).unwrap();
        assert_eq!(traces.len(), 2);
        for t in &traces {
            assert_eq!(t.trace.len(), 200 - cfg.burnin);
            assert!(t.late_slope.is_some());
            assert_eq!(t.outcome, RunOutcome::NoActivation);
        }
        let again =
            statistic_trace_ablation(&model, &betas, false, hp, &cfg, &theta0, &parent).unwrap();
        assert_eq!(traces[0].trace, again[0].trace);
        assert_eq!(traces[1].trace, again[1].trace);
    }

    #[test]
    fn ablation_with_reduction_tracks_live_statistic() {
        let mut rng = RngStream::new(77, 0);
        let data = gen_quadratic(20, 1000, 1.0, &mut rng).unwrap();
        let model = LossModel::new(LossKind::Quadratic, data);
        let hp = HyperParams::new(1e-2, 0.2, 0.0, 20, 20).unwrap();
        let cfg = DiagnosticConfig {
            threshold: ThresholdRule::RelativeToFirst { tau: 0.6 },
            check_period_c: 50,
            burnin: 50,
            heuristic_kind: HeuristicKind::GradNorm,
            beta_final: 0.2,
        };
        let traces = statistic_trace_ablation(
            &model,
            &[0.2],
            true,
            hp,
            &cfg,
            &ParamVector::zeros(20),
            &RngStream::new(78, 0),
        )
        .unwrap();
        let t = &traces[0];
        assert!(matches!(t.outcome, RunOutcome::Activated { .. }));
        let (_, s_last) = *t.trace.last().unwrap();
        assert!(s_last < 0.0, "live statistic ends at {s_last}");
    }

    fn small_logistic(seed: u64) -> (LossModel, Dataset) {
        let mut rng = RngStream::new(seed, 0);
        let train = gen_logistic(5, 300, 3.0, &mut rng).unwrap();
        let eval = gen_logistic(5, 300, 3.0, &mut rng.substream(999)).unwrap();
        (LossModel::new(LossKind::Logistic, train), eval)
    }

    fn sweep_base(epochs: usize) -> ScheduleConfig {
        let hp = HyperParams::new(0.5, 0.2, 0.0, 10, epochs).unwrap();
        let diag = DiagnosticConfig {
            threshold: ThresholdRule::RelativeToFirst { tau: 0.5 },
            check_period_c: 30,
            burnin: 30,
            heuristic_kind: HeuristicKind::GradNorm,
            beta_final: 0.2,
        };
        ScheduleConfig::with_defaults(0.5, hp, diag)
    }

    #[test]
    fn sweep_requires_classification_model() {
        let mut rng = RngStream::new(5, 0);
        let data = gen_quadratic(4, 50, 1.0, &mut rng).unwrap();
        let model = LossModel::new(LossKind::Quadratic, data);
        let (_, eval) = small_logistic(6);
        let e = robustness_sweep(
            &model,
            &[0.1],
            SweepMode::Auto,
            &sweep_base(2),
            &ParamVector::zeros(4),
            &RngStream::new(1, 0),
            &eval,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Unsupported(_)), "{e}");
    }

    #[test]
    fn sweep_produces_paired_tables() {
        let (model, eval) = small_logistic(61);
        let base = sweep_base(4);
        let theta0 = ParamVector::zeros(5);
        let rng = RngStream::new(62, 0);
        let gamma0s = [0.5, 0.05];
        let auto = robustness_sweep(
            &model,
            &gamma0s,
            SweepMode::Auto,
            &base,
            &theta0,
            &rng,
            &eval,
        )
        .unwrap();
        let dec = robustness_sweep(
            &model,
            &gamma0s,
            SweepMode::Decreasing,
            &base,
            &theta0,
            &rng,
            &eval,
        )
        .unwrap();
        for table in [&auto, &dec] {
            assert_eq!(table.cells.len(), 2);
            for cell in &table.cells {
                let acc = cell.accuracy.expect("no divergence at these rates");
                assert!((0.4..=1.0).contains(&acc), "accuracy {acc}");
            }
        }
        for cell in &auto.cells {
            assert!(cell.stages_run >= 1);
        }
        for cell in &dec.cells {
            assert_eq!(cell.stages_run, 0);
        }
        let again = robustness_sweep(
            &model,
            &gamma0s,
            SweepMode::Auto,
            &base,
            &theta0,
            &rng,
            &eval,
        )
        .unwrap();
        assert_eq!(
            auto.cells.iter().map(|c| c.accuracy).collect::<Vec<_>>(),
            again.cells.iter().map(|c| c.accuracy).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sweep_marks_divergent_cells() {
        let (model, eval) = small_logistic(63);
        let base = sweep_base(2);
        let table = robustness_sweep(
            &model,
            &[1e308],
            SweepMode::Auto,
            &base,
            &ParamVector::zeros(5),
            &RngStream::new(64, 0),
            &eval,
        )
        .unwrap();
        let cell = &table.cells[0];
        assert_eq!(cell.accuracy, None);
        assert!(cell.diverged_at.is_some(), "cell did not diverge");
    }

    #[test]
    fn accuracy_counts_sign_matches() {
        // Two separable rows: θ = (1) classifies both correctly, −θ none.
        let data = Dataset::from_rows(vec![2.0, -2.0], vec![1.0, 0.0], 1).unwrap();
        let theta = pv1(1.0);
        assert_eq!(classification_accuracy(&theta, &data).unwrap(), 1.0);
        assert_eq!(
            classification_accuracy(&theta.scale(-1.0), &data).unwrap(),
            0.0
        );
    }

    #[test]
    fn histogram_degenerates_to_single_bin() {
        let (edges, counts) = histogram(&[2.0; 10], 8);
        assert_eq!(counts, vec![10]);
        assert_eq!(edges.len(), 2);
    }
}
