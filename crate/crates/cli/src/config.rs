//! TOML run configuration shared by `gen`, `train` and `eval`.
//!
//! ```toml
//! seed = 7
//! train_k = 600
//! val_k = 600
//!
//! [problem]
//! kind = "deconv1d"
//! n = 60
//! kernel_variance = 2.0
//! noise = 0.01
//!
//! [solver]
//! kind = "orim"
//! rank = 10
//! measure = { kind = "pnorm", p = 5.0 }
//! [solver.update]          # omit for the closed form (squared 2-norm only)
//! ell = 10
//!
//! [eval]
//! sweep_ranks = [1, 2, 4, 8]
//! density_bins = 40
//!
//! [outputs]
//! dir = "run"
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::fmt;
use std::path::{Path, PathBuf};

use orim_core::rankupdate::{InnerMethod, UpdateConfig};
use orim_core::{ErrorMeasure, Summation};
use serde::{Deserialize, Serialize};

use crate::experiments::{Deblur2D, Deconv1D, Problem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub train_k: usize,
    pub val_k: usize,
    #[serde(default)]
    pub seed: u64,
    pub solver: SolverConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub outputs: Outputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureConfig {
    Squared,
    Pnorm {
        p: f64,
    },
    SmoothedPnorm {
        p: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    Huber {
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
}

fn default_epsilon() -> f64 {
    orim_core::model::DEFAULT_SMOOTHING
}

fn default_threshold() -> f64 {
    orim_core::model::DEFAULT_HUBER_THRESHOLD
}

impl MeasureConfig {
    pub fn build(&self) -> orim_core::Result<ErrorMeasure> {
        match *self {
            MeasureConfig::Squared => Ok(ErrorMeasure::squared()),
            MeasureConfig::Pnorm { p } => ErrorMeasure::pnorm(p),
            MeasureConfig::SmoothedPnorm { p, epsilon } => ErrorMeasure::smoothed_pnorm(p, epsilon),
            MeasureConfig::Huber { threshold } => ErrorMeasure::huber(threshold),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    GaussNewton,
    Lbfgs,
}

/// Overrides for the rank-update solver; unset fields keep the library
/// defaults for the chosen measure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateSpec {
    pub ell: Option<usize>,
    pub ell_schedule: Option<Vec<usize>>,
    pub f_max: Option<f64>,
    pub rel_improve_tol: Option<f64>,
    pub rank_deficiency_tau: Option<f64>,
    pub method: Option<MethodName>,
    pub max_sweeps: Option<usize>,
    pub sweep_tol: Option<f64>,
    pub inner_max_iter: Option<usize>,
    pub inner_tol: Option<f64>,
    pub cg_tol: Option<f64>,
    pub lbfgs_memory: Option<usize>,
}

impl UpdateSpec {
    pub fn build(&self, rank: usize, measure: &ErrorMeasure, summation: Summation) -> UpdateConfig {
        let mut cfg = UpdateConfig::new(rank, measure);
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set! {
            ell => cfg.ell,
            ell_schedule => cfg.ell_schedule,
            f_max => cfg.f_max,
            rel_improve_tol => cfg.rel_improve_tol,
            rank_deficiency_tau => cfg.rank_deficiency_tau,
            max_sweeps => cfg.inner.max_sweeps,
            sweep_tol => cfg.inner.sweep_tol,
            inner_max_iter => cfg.inner.inner_max_iter,
            inner_tol => cfg.inner.inner_tol,
            cg_tol => cfg.inner.cg_tol,
            lbfgs_memory => cfg.inner.lbfgs_memory,
        }
        if let Some(m) = self.method {
            cfg.inner.method = match m {
                MethodName::GaussNewton => InnerMethod::GaussNewton,
                MethodName::Lbfgs => InnerMethod::Lbfgs,
            };
        }
        cfg.inner.summation = summation;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrimSolver {
    pub rank: usize,
    pub measure: MeasureConfig,
    /// `None` selects the closed form.
    #[serde(default)]
    pub update: Option<UpdateSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvdASolver {
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvdAhatSolver {
    pub r_bar: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    /// `xi ~ (0, beta^2 I)`, `delta ~ (0, eta^2 I)`.
    White { beta: f64, eta: f64 },
    /// Second moment of the training truths and the residual noise level of
    /// the known forward model.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesOracleSolver {
    pub rank: usize,
    pub prior: PriorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverConfig {
    Orim(OrimSolver),
    TsvdA(TsvdASolver),
    TsvdAhat(TsvdAhatSolver),
    BayesOracle(BayesOracleSolver),
}

impl SolverConfig {
    pub fn rank(&self) -> usize {
        match self {
            SolverConfig::Orim(s) => s.rank,
            SolverConfig::TsvdA(s) => s.rank,
            SolverConfig::TsvdAhat(s) => s.rank,
            SolverConfig::BayesOracle(s) => s.rank,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverConfig::Orim(s) if s.update.is_none() => "orim_closed_form",
            SolverConfig::Orim(_) => "orim_rank_update",
            SolverConfig::TsvdA(_) => "tsvd_a",
            SolverConfig::TsvdAhat(_) => "tsvd_ahat",
            SolverConfig::BayesOracle(_) => "bayes_oracle",
        }
    }

    /// Measure the solver optimizes; the squared 2-norm for the baselines.
    pub fn measure(&self) -> MeasureConfig {
        match self {
            SolverConfig::Orim(s) => s.measure,
            _ => MeasureConfig::Squared,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Measure for validation errors; defaults to the solver's.
    pub measure: Option<MeasureConfig>,
    /// Ranks of the leading sub-operators to evaluate.
    pub sweep_ranks: Vec<usize>,
    /// Training-set sizes for a Pareto study of the closed form.
    pub pareto_k: Vec<usize>,
    /// Histogram bins of the per-sample errors; 0 disables.
    pub density_bins: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
    /// Write CSV copies of every matrix container.
    pub csv: bool,
    pub svg: bool,
}

/// Invalid configuration, located by file position or field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn bad(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        message: message.into(),
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("must be finite and > 0, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("must be finite and >= 0, got {v}")))
    }
}

impl ExperimentConfig {
    /// Parses and validates; parse errors carry line and column.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| bad("", e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| bad("", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError {
            message: format!("{} ({})", e.message, path.display()),
            ..e
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.problem {
            Problem::Deconv1d(Deconv1D {
                n,
                kernel_variance,
                noise,
            }) => {
                if n == 0 {
                    return Err(bad("problem.n", "must be >= 1"));
                }
                positive("problem.kernel_variance", kernel_variance)?;
                nonnegative("problem.noise", noise)?;
            }
            Problem::Deblur2d(Deblur2D {
                side,
                psf_variance,
                noise_range,
            }) => {
                if side == 0 {
                    return Err(bad("problem.side", "must be >= 1"));
                }
                positive("problem.psf_variance", psf_variance)?;
                nonnegative("problem.noise_range", noise_range[0])?;
                nonnegative("problem.noise_range", noise_range[1])?;
                if noise_range[0] > noise_range[1] {
                    return Err(bad("problem.noise_range", "needs lo <= hi"));
                }
            }
        }
        if self.train_k == 0 {
            return Err(bad("train_k", "must be >= 1"));
        }
        if self.val_k == 0 {
            return Err(bad("val_k", "must be >= 1"));
        }
        self.validate_solver()?;
        self.validate_eval()?;
        if let Some(dir) = &self.outputs.dir {
            if dir.as_os_str().is_empty() {
                return Err(bad("outputs.dir", "must not be empty"));
            }
        }
        Ok(())
    }

    fn validate_solver(&self) -> Result<(), ConfigError> {
        let dim = self.problem.signal_dim();
        let rank = self.solver.rank();
        if rank == 0 || rank > dim {
            return Err(bad("solver.rank", format!("must be in 1..={dim}, got {rank}")));
        }
        match &self.solver {
            SolverConfig::Orim(s) => {
                let measure = s.measure.build().map_err(|e| bad("solver.measure", e.to_string()))?;
                match &s.update {
                    None if !measure.is_quadratic() => {
                        return Err(bad(
                            "solver.update",
                            format!(
                                "the closed form needs the squared 2-norm; {measure} requires an [solver.update] table"
                            ),
                        ))
                    }
                    None => {}
                    Some(u) => u
                        .build(rank, &measure, Summation::Ordered)
                        .validate()
                        .map_err(|e| bad("solver.update", e.to_string()))?,
                }
            }
            SolverConfig::TsvdA(_) => {}
            SolverConfig::TsvdAhat(s) => {
                if s.r_bar < s.rank || s.r_bar > dim {
                    return Err(bad("solver.r_bar", format!("must be in rank..={dim}, got {}", s.r_bar)));
                }
            }
            SolverConfig::BayesOracle(s) => {
                if let PriorConfig::White { beta, eta } = s.prior {
                    positive("solver.prior.beta", beta)?;
                    nonnegative("solver.prior.eta", eta)?;
                }
            }
        }
        Ok(())
    }

    fn validate_eval(&self) -> Result<(), ConfigError> {
        if let Some(m) = &self.eval.measure {
            m.build().map_err(|e| bad("eval.measure", e.to_string()))?;
        }
        let rank = self.solver.rank();
        if let Some(&r) = self.eval.sweep_ranks.iter().find(|&&r| r == 0 || r > rank) {
            return Err(bad("eval.sweep_ranks", format!("ranks must be in 1..={rank}, got {r}")));
        }
        if self.eval.sweep_ranks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("eval.sweep_ranks", "must be strictly increasing"));
        }
        if self.eval.pareto_k.contains(&0) {
            return Err(bad("eval.pareto_k", "sizes must be >= 1"));
        }
        Ok(())
    }

    /// Measure used for validation errors.
    pub fn eval_measure(&self) -> ErrorMeasure {
        self.eval
            .measure
            .unwrap_or_else(|| self.solver.measure())
            .build()
            .expect("validated measure")
    }
}
