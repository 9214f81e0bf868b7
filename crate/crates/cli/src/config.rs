//! Experiment configuration: the TOML schema, the stock presets, and the
//! flag/environment resolution rules.
//!
//! A configuration is resolved in four steps: load (preset or file), apply
//! command-line overrides, fill defaults, validate.  The resolved value is
//! echoed as `config.toml` next to the other artifacts and parses back to
//! the identical configuration, so any echo can be re-run with `--config`.
//!
//! Scalar and array fields precede table-valued fields in every struct here;
//! the TOML serializer requires that order.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stepdown::diagnostic::DiagnosticConfig;
use stepdown::harness::{ErrorCriteria, ErrorRateDesign, ErrorRatePreset, InitKind};
use stepdown::optimizer::HyperParams;
use stepdown::problems::LossKind;
use stepdown::{Error, Result};

/// Stock experiment names accepted by `--preset`, in help order.
pub const PRESET_NAMES: &[&str] = &[
    "table1",
    "table2-qlow",
    "table2-qhigh",
    "table2-prlow",
    "table2-prhigh",
    "fig1-3-distributions",
    "fig4-6-autolr",
    "fig5-mnist",
    "fig7-9-ablation",
    "theory-checks",
];

/// Which driver `run` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Classify repeated diagnostic runs as type-I / type-II / good.
    ErrorRates,
    /// Mean stationary inner product per momentum level, no reduction.
    SignFlip,
    /// Transient and stationary inner-product histograms plus the
    /// gradient-norm/cosine scatter of one long run per momentum level.
    Distributions,
    /// Automatic step-decay schedule vs. a decreasing-rate baseline over a
    /// grid of initial rates.
    AutoLr,
    /// Running-statistic traces across momentum levels.
    Ablation,
    /// Closed forms against Monte-Carlo oracles and bound checks on a
    /// reference run.
    TheoryChecks,
}

impl ExperimentKind {
    /// Kebab-case name used for default labels and output directories.
    pub fn label(self) -> &'static str {
        match self {
            ExperimentKind::ErrorRates => "error-rates",
            ExperimentKind::SignFlip => "sign-flip",
            ExperimentKind::Distributions => "distributions",
            ExperimentKind::AutoLr => "auto-lr",
            ExperimentKind::Ablation => "ablation",
            ExperimentKind::TheoryChecks => "theory-checks",
        }
    }
}

/// Data source for the optimization problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Quadratic,
    PhaseRetrieval,
    Logistic,
    Mnist,
    Csv,
}

/// Problem section.  Synthetic kinds draw from the experiment seed; `mnist`
/// reads the four standard IDX files from a directory and `csv` reads one
/// labeled table, split 80/20 into train and evaluation rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Parameter dimension (synthetic kinds).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    /// Training sample count (synthetic kinds).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Observation noise standard deviation (quadratic only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sd: Option<f64>,
    /// Feature scale for synthetic logistic data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    /// Held-out sample count for synthetic logistic evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_n: Option<usize>,
    /// Dataset path: a directory of IDX files for `mnist`, a file for `csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Digits labeled 1 in the binary MNIST task.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positive_digits: Option<Vec<u8>>,
    /// Label column name for `csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    /// Threshold mapping a numeric CSV label column to {0, 1}.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binarize_threshold: Option<f64>,
}

impl ProblemConfig {
    fn synthetic(kind: ProblemKind, p: usize, n: usize) -> Self {
        ProblemConfig {
            kind,
            p: Some(p),
            n: Some(n),
            noise_sd: None,
            scale: None,
            eval_n: None,
            data: None,
            positive_digits: None,
            label_column: None,
            binarize_threshold: None,
        }
    }

    fn require_dims(&self) -> Result<(usize, usize)> {
        match (self.p, self.n) {
            (Some(p), Some(n)) if p >= 1 && n >= 1 => Ok((p, n)),
            (Some(_), Some(_)) => Err(Error::InvalidArgument(
                "problem.p and problem.n must be at least 1".into(),
            )),
            _ => Err(Error::InvalidArgument(
                "synthetic problems need problem.p and problem.n".into(),
            )),
        }
    }

    /// Checks the fields that the declared kind requires.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ProblemKind::Quadratic => {
                self.require_dims()?;
                match self.noise_sd {
                    Some(sd) if sd > 0.0 && sd.is_finite() => Ok(()),
                    Some(sd) => Err(Error::InvalidArgument(format!(
                        "problem.noise_sd must be positive and finite, got {sd}"
                    ))),
                    None => Err(Error::InvalidArgument(
                        "quadratic problems need problem.noise_sd".into(),
                    )),
                }
            }
            ProblemKind::PhaseRetrieval => self.require_dims().map(|_| ()),
            ProblemKind::Logistic => {
                self.require_dims()?;
                if let Some(s) = self.scale {
                    if !(s > 0.0 && s.is_finite()) {
                        return Err(Error::InvalidArgument(format!(
                            "problem.scale must be positive and finite, got {s}"
                        )));
                    }
                }
                Ok(())
            }
            ProblemKind::Mnist => {
                if self.data.is_none() {
                    return Err(Error::InvalidArgument(
                        "mnist problems need a dataset path: pass --data <DIR> \
                         or set problem.data"
                            .into(),
                    ));
                }
                Ok(())
            }
            ProblemKind::Csv => {
                if self.data.is_none() {
                    return Err(Error::InvalidArgument(
                        "csv problems need a dataset path: pass --data <FILE> \
                         or set problem.data"
                            .into(),
                    ));
                }
                if self.label_column.is_none() {
                    return Err(Error::InvalidArgument(
                        "csv problems need problem.label_column".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Schedule section for `auto_lr`.  `gamma_min` defaults to `gamma0 / 1000`;
/// the ratio `gamma_min / gamma0` is preserved across a `gammas` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub gamma0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_min: Option<f64>,
    pub rho: f64,
    pub stage_max_epochs: usize,
}

/// One experiment: the kind, its execution knobs, and the problem,
/// optimizer, diagnostic, and grading sections the kind requires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Root seed; fully determines every output.
    #[serde(default)]
    pub seed: u64,
    /// Independent repetitions (`error_rates`, `sign_flip`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<usize>,
    /// Artifact directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 or absent means all cores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    /// Name used in artifact paths and report headers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Initial-rate grid (`auto_lr`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
    /// Momentum grid (`sign_flip`, `distributions`, `ablation`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    /// Whether `ablation` runs the momentum switch live.
    #[serde(default)]
    pub momentum_reduction: bool,
    /// Final-iterate gate for phase-retrieval error rates, as a multiple of
    /// `criteria.eta`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<HyperParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<DiagnosticConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSection>,
    /// Grading thresholds; omitted means calibrate from pilot runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub criteria: Option<ErrorCriteria>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<InitKind>,
}

impl ExperimentConfig {
    fn bare(experiment: ExperimentKind) -> Self {
        ExperimentConfig {
            experiment,
            seed: 0,
            runs: None,
            out: None,
            jobs: None,
            label: None,
            gammas: None,
            betas: None,
            momentum_reduction: false,
            gate_factor: None,
            problem: None,
            hyperparams: None,
            diagnostic: None,
            schedule: None,
            criteria: None,
            init: None,
        }
    }

    /// Effective label for reports and default output paths.
    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.experiment.label().to_string())
    }

    /// Effective output directory.
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("results").join(self.label()))
    }

    /// Fills kind-dependent defaults so the echoed configuration is explicit
    /// where a default would change results.
    pub fn fill_defaults(&mut self) {
        match self.experiment {
            ExperimentKind::ErrorRates => {
                self.runs.get_or_insert(100);
                self.init.get_or_insert(InitKind::Zero);
            }
            ExperimentKind::SignFlip => {
                self.runs.get_or_insert(25);
                self.betas.get_or_insert_with(|| vec![0.2, 0.8]);
            }
            ExperimentKind::Distributions => {
                self.betas.get_or_insert_with(|| vec![0.2, 0.8]);
            }
            ExperimentKind::AutoLr => {
                self.gammas.get_or_insert_with(|| vec![1.0, 0.1, 0.01]);
                if let Some(problem) = &mut self.problem {
                    match problem.kind {
                        ProblemKind::Logistic => {
                            problem.scale.get_or_insert(3.0);
                            let n = problem.n.unwrap_or(0);
                            problem.eval_n.get_or_insert(n.div_ceil(2).max(1));
                        }
                        ProblemKind::Mnist => {
                            problem
                                .positive_digits
                                .get_or_insert_with(|| vec![0, 2, 4, 6, 8]);
                        }
                        _ => {}
                    }
                }
            }
            ExperimentKind::Ablation => {
                self.betas.get_or_insert_with(|| vec![0.2, 0.4, 0.6, 0.8]);
            }
            ExperimentKind::TheoryChecks => {}
        }
    }

    fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T> {
        section.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("this experiment needs a [{name}] section"))
        })
    }

    /// Validates every section the experiment kind requires, surfacing the
    /// violated invariant by name.
    pub fn validate(&self) -> Result<()> {
        if let Some(runs) = self.runs {
            if runs == 0 {
                return Err(Error::InvalidArgument("runs must be at least 1".into()));
            }
        }
        if let Some(betas) = &self.betas {
            if betas.is_empty() {
                return Err(Error::InvalidArgument("betas must be non-empty".into()));
            }
            for &b in betas {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::InvalidArgument(format!(
                        "betas entries must lie in [0, 1), got {b}"
                    )));
                }
            }
        }
        if let Some(gammas) = &self.gammas {
            if gammas.is_empty() {
                return Err(Error::InvalidArgument("gammas must be non-empty".into()));
            }
            for &g in gammas {
                if !(g > 0.0 && g.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "gammas entries must be positive and finite, got {g}"
                    )));
                }
            }
        }
        if let Some(factor) = self.gate_factor {
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "gate_factor must be positive and finite, got {factor}"
                )));
            }
        }
        match self.experiment {
            ExperimentKind::ErrorRates => {
                let problem = Self::require(&self.problem, "problem")?;
                problem.validate()?;
                if !matches!(
                    problem.kind,
                    ProblemKind::Quadratic | ProblemKind::PhaseRetrieval
                ) {
                    return Err(Error::InvalidArgument(
                        "error_rates supports problem kinds quadratic and \
                         phase_retrieval"
                            .into(),
                    ));
                }
                Self::require(&self.hyperparams, "hyperparams")?.validate()?;
                Self::require(&self.diagnostic, "diagnostic")?.validate()?;
                if let Some(criteria) = &self.criteria {
                    criteria.validate()?;
                }
                Ok(())
            }
            ExperimentKind::SignFlip | ExperimentKind::Distributions => {
                let problem = Self::require(&self.problem, "problem")?;
                problem.validate()?;
                if problem.kind != ProblemKind::Quadratic {
                    return Err(Error::InvalidArgument(format!(
                        "{} supports problem kind quadratic",
                        self.experiment.label().replace('-', "_")
                    )));
                }
                Self::require(&self.hyperparams, "hyperparams")?.validate()?;
                Self::require(&self.diagnostic, "diagnostic")?.validate()?;
                Ok(())
            }
            ExperimentKind::AutoLr => {
                let problem = Self::require(&self.problem, "problem")?;
                problem.validate()?;
                if !matches!(
                    problem.kind,
                    ProblemKind::Logistic | ProblemKind::Mnist | ProblemKind::Csv
                ) {
                    return Err(Error::InvalidArgument(
                        "auto_lr supports problem kinds logistic, mnist, and csv"
                            .into(),
                    ));
                }
                let hp = Self::require(&self.hyperparams, "hyperparams")?;
                hp.validate()?;
                let diag = Self::require(&self.diagnostic, "diagnostic")?;
                diag.validate()?;
                let section = Self::require(&self.schedule, "schedule")?;
                schedule_config(section, hp.clone(), diag.clone())?.validate()?;
                Ok(())
            }
            ExperimentKind::Ablation => {
                let problem = Self::require(&self.problem, "problem")?;
                problem.validate()?;
                if problem.kind != ProblemKind::Quadratic {
                    return Err(Error::InvalidArgument(
                        "ablation supports problem kind quadratic".into(),
                    ));
                }
                Self::require(&self.hyperparams, "hyperparams")?.validate()?;
                Self::require(&self.diagnostic, "diagnostic")?.validate()?;
                Ok(())
            }
            ExperimentKind::TheoryChecks => Ok(()),
        }
    }

    /// Reconstructs the error-rate design this configuration describes.
    /// Callers must have validated the configuration first.
    pub fn error_rate_design(&self) -> Result<ErrorRateDesign> {
        let problem = Self::require(&self.problem, "problem")?;
        let (p, n) = problem.require_dims()?;
        let loss = match problem.kind {
            ProblemKind::Quadratic => LossKind::Quadratic,
            ProblemKind::PhaseRetrieval => LossKind::PhaseRetrieval,
            _ => {
                return Err(Error::InvalidArgument(
                    "error_rates supports problem kinds quadratic and \
                     phase_retrieval"
                        .into(),
                ))
            }
        };
        let criteria = self.criteria.clone().ok_or_else(|| {
            Error::InvalidArgument("error-rate design needs [criteria]".into())
        })?;
        let design = ErrorRateDesign {
            label: self.label(),
            loss,
            p,
            n,
            noise_sd: problem.noise_sd,
            hp: Self::require(&self.hyperparams, "hyperparams")?.clone(),
            diag: Self::require(&self.diagnostic, "diagnostic")?.clone(),
            init: self.init.clone().unwrap_or(InitKind::Zero),
            crit: criteria,
            gate_factor: self.gate_factor,
        };
        design.validate()?;
        Ok(design)
    }
}

/// Assembles the core schedule configuration from the CLI section.
pub fn schedule_config(
    section: &ScheduleSection,
    hp: HyperParams,
    diag: DiagnosticConfig,
) -> Result<stepdown::schedule::ScheduleConfig> {
    Ok(stepdown::schedule::ScheduleConfig {
        gamma0: section.gamma0,
        gamma_min: section.gamma_min.unwrap_or(section.gamma0 * 1e-3),
        rho: section.rho,
        stage_max_epochs: section.stage_max_epochs,
        diag,
        hp,
    })
}

fn quadratic_reference_problem() -> ProblemConfig {
    let mut problem = ProblemConfig::synthetic(ProblemKind::Quadratic, 20, 1000);
    problem.noise_sd = Some(1.0);
    problem
}

fn disabled_switch(check_period_c: usize, burnin: usize, beta_final: f64) -> DiagnosticConfig {
    use stepdown::diagnostic::{HeuristicKind, ThresholdRule};
    DiagnosticConfig {
        check_period_c,
        burnin,
        heuristic_kind: HeuristicKind::GradNorm,
        beta_final,
        threshold: ThresholdRule::Absolute { t: 0.0 },
    }
}

fn error_rates_preset(preset: ErrorRatePreset) -> ExperimentConfig {
    let design = preset.design();
    let mut cfg = ExperimentConfig::bare(ExperimentKind::ErrorRates);
    cfg.runs = Some(100);
    cfg.label = Some(design.label.clone());
    cfg.gate_factor = design.gate_factor;
    let kind = match design.loss {
        LossKind::Quadratic => ProblemKind::Quadratic,
        LossKind::PhaseRetrieval => ProblemKind::PhaseRetrieval,
        LossKind::Logistic => unreachable!("no logistic error-rate preset"),
    };
    let mut problem = ProblemConfig::synthetic(kind, design.p, design.n);
    problem.noise_sd = design.noise_sd;
    cfg.problem = Some(problem);
    cfg.hyperparams = Some(design.hp);
    cfg.diagnostic = Some(design.diag);
    cfg.criteria = Some(design.crit);
    cfg.init = Some(design.init);
    cfg
}

fn sign_flip_preset() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::bare(ExperimentKind::SignFlip);
    cfg.runs = Some(25);
    cfg.betas = Some(vec![0.2, 0.8]);
    cfg.problem = Some(quadratic_reference_problem());
    cfg.hyperparams = Some(
        HyperParams::new(0.01, 0.2, 0.0, 20, 50).expect("preset hyperparams"),
    );
    cfg.diagnostic = Some(disabled_switch(50, 50, 0.0));
    cfg
}

fn distributions_preset() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::bare(ExperimentKind::Distributions);
    cfg.betas = Some(vec![0.2, 0.8]);
    cfg.problem = Some(quadratic_reference_problem());
    cfg.hyperparams = Some(
        HyperParams::new(0.01, 0.2, 0.0, 20, 100).expect("preset hyperparams"),
    );
    cfg.diagnostic = Some(disabled_switch(50, 50, 0.0));
    cfg
}

fn autolr_preset() -> ExperimentConfig {
    use stepdown::diagnostic::{HeuristicKind, ThresholdRule};
    let mut cfg = ExperimentConfig::bare(ExperimentKind::AutoLr);
    cfg.gammas = Some(vec![1.0, 0.1, 0.01]);
    let mut problem = ProblemConfig::synthetic(ProblemKind::Logistic, 20, 4000);
    problem.scale = Some(3.0);
    problem.eval_n = Some(2000);
    cfg.problem = Some(problem);
    cfg.hyperparams = Some(
        HyperParams::new(1.0, 0.8, 0.2, 20, 10).expect("preset hyperparams"),
    );
    cfg.diagnostic = Some(DiagnosticConfig {
        check_period_c: 200,
        burnin: 200,
        heuristic_kind: HeuristicKind::GradNorm,
        beta_final: 0.2,
        threshold: ThresholdRule::RelativeToFirst { tau: 0.9 },
    });
    cfg.schedule = Some(ScheduleSection {
        gamma0: 1.0,
        gamma_min: None,
        rho: 0.1,
        stage_max_epochs: 10,
    });
    cfg
}

fn mnist_preset() -> ExperimentConfig {
    use stepdown::diagnostic::{HeuristicKind, ThresholdRule};
    let mut cfg = autolr_preset();
    cfg.label = Some("auto-lr-mnist".into());
    cfg.gammas = Some(vec![0.5, 0.05, 0.005]);
    cfg.problem = Some(ProblemConfig {
        kind: ProblemKind::Mnist,
        p: None,
        n: None,
        noise_sd: None,
        scale: None,
        eval_n: None,
        data: None,
        positive_digits: Some(vec![0, 2, 4, 6, 8]),
        label_column: None,
        binarize_threshold: None,
    });
    cfg.hyperparams = Some(
        HyperParams::new(0.5, 0.8, 0.2, 20, 3).expect("preset hyperparams"),
    );
    // A third of a 60000-sample epoch per check, so a 3-epoch stage has
    // room for the switch and, one burn-in later, the activation check.
    cfg.diagnostic = Some(DiagnosticConfig {
        check_period_c: 1000,
        burnin: 1000,
        heuristic_kind: HeuristicKind::GradNorm,
        beta_final: 0.2,
        threshold: ThresholdRule::RelativeToFirst { tau: 0.9 },
    });
    cfg.schedule = Some(ScheduleSection {
        gamma0: 0.5,
        gamma_min: None,
        rho: 0.1,
        stage_max_epochs: 3,
    });
    cfg
}

fn ablation_preset() -> ExperimentConfig {
    use stepdown::diagnostic::{HeuristicKind, ThresholdRule};
    let mut cfg = ExperimentConfig::bare(ExperimentKind::Ablation);
    cfg.betas = Some(vec![0.2, 0.4, 0.6, 0.8]);
    cfg.momentum_reduction = false;
    cfg.problem = Some(quadratic_reference_problem());
    cfg.hyperparams = Some(
        HyperParams::new(0.01, 0.2, 0.0, 20, 50).expect("preset hyperparams"),
    );
    cfg.diagnostic = Some(DiagnosticConfig {
        check_period_c: 50,
        burnin: 50,
        heuristic_kind: HeuristicKind::GradNorm,
        beta_final: 0.2,
        threshold: ThresholdRule::RelativeToFirst { tau: 0.6 },
    });
    cfg
}

/// Returns the named stock configuration.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        "table1" => sign_flip_preset(),
        "table2-qlow" => error_rates_preset(ErrorRatePreset::QuadLow),
        "table2-qhigh" => error_rates_preset(ErrorRatePreset::QuadHigh),
        "table2-prlow" => error_rates_preset(ErrorRatePreset::RetrievalLow),
        "table2-prhigh" => error_rates_preset(ErrorRatePreset::RetrievalHigh),
        "fig1-3-distributions" => distributions_preset(),
        "fig4-6-autolr" => autolr_preset(),
        "fig5-mnist" => mnist_preset(),
        "fig7-9-ablation" => ablation_preset(),
        "theory-checks" => ExperimentConfig::bare(ExperimentKind::TheoryChecks),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset \"{other}\"; expected one of: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Command-line overrides applied on top of a loaded configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

/// Applies overrides, fills defaults, and validates.  The returned
/// configuration is the one echoed to `config.toml`.
pub fn resolve(mut cfg: ExperimentConfig, overrides: &Overrides) -> Result<ExperimentConfig> {
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = overrides.runs {
        cfg.runs = Some(runs);
    }
    if let Some(jobs) = overrides.jobs {
        cfg.jobs = Some(jobs);
    }
    if let Some(out) = &overrides.out {
        cfg.out = Some(out.clone());
    }
    if let Some(data) = &overrides.data {
        if let Some(problem) = &mut cfg.problem {
            problem.data = Some(data.clone());
        }
    }
    cfg.fill_defaults();
    cfg.validate()?;
    Ok(cfg)
}
