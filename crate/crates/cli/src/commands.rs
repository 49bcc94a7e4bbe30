//! The `gen`, `train`, `eval` and `reproduce` stages.
//!
//! Every stage reads and writes plain files in one output directory, so the
//! stages can be rerun independently.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use orim_core::baselines::{estimate_a, tsvd_estimated_a, tsvd_known_a};
use orim_core::bayes::bayes_opt_rank;
use orim_core::datagen::{derive_seed, noise_ratios};
use orim_core::evalstats::{density, error_report, rank_sweep};
use orim_core::rankupdate::rank_update_solve;
use orim_core::{
    sample_mean_error, ErrorMeasure, LowRankInverse, Orim2Solver, OrimError, Summation, TrainingSet, UpdateHistory,
};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig, PriorConfig, SolverConfig};
use crate::container::{read_matrix, to_csv, write_matrix};
use crate::experiments::{
    abs_errors_csv, densities_csv, exp1, exp2, exp3, p_label, pareto, reports_csv, Exp1Config, Exp2Config, Exp3Config,
    LabeledReport, MethodSweeps, Problem, SOLVER_TAG,
};
use crate::svg::{box_chart, density_chart, line_chart, Series};

pub const TRAIN_B: &str = "train_B.orim";
pub const TRAIN_C: &str = "train_C.orim";
pub const VAL_B: &str = "val_B.orim";
pub const VAL_C: &str = "val_C.orim";
pub const OP_X: &str = "X.orim";
pub const OP_Y: &str = "Y.orim";
pub const TRAIN_META: &str = "train_meta.toml";
pub const HISTORY: &str = "history.csv";
pub const REPORT: &str = "report.csv";
pub const SAMPLE_ERRORS: &str = "errors.csv";
pub const SWEEP: &str = "sweep.csv";
pub const PARETO: &str = "pareto.csv";
pub const DENSITY: &str = "density.csv";

/// Failure of a stage, classified by the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error("solver failure: {0}")]
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Solver(_) => 4,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Classify<T> {
    fn data(self, context: &str) -> CliResult<T>;
    fn solver(self, context: &str) -> CliResult<T>;
}

impl<T> Classify<T> for orim_core::Result<T> {
    fn data(self, context: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Data(format!("{context}: {e}")))
    }

    fn solver(self, context: &str) -> CliResult<T> {
        self.map_err(|e| match e {
            OrimError::Io(_) | OrimError::Format(_) => CliError::Data(format!("{context}: {e}")),
            e => CliError::Solver(format!("{context}: {e}")),
        })
    }
}

/// Settings that come from the command line rather than the config file.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub summation: Summation,
    pub svg: bool,
    pub csv: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        RunOptions {
            out: out.into(),
            summation: Summation::Ordered,
            svg: false,
            csv: false,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure_dir(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", self.out.display())))
    }

    fn write_text(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    fn write_matrix(&self, name: &str, m: &DMatrix<f64>) -> CliResult<()> {
        write_matrix(&self.path(name), m).data("write")?;
        if self.csv {
            self.write_text(&name.replace(".orim", ".csv"), &to_csv(m))?;
        }
        Ok(())
    }

    fn read_matrix(&self, name: &str) -> CliResult<DMatrix<f64>> {
        read_matrix(&self.path(name)).data("read")
    }

    fn read_set(&self, b: &str, c: &str) -> CliResult<TrainingSet> {
        TrainingSet::new(self.read_matrix(b)?, self.read_matrix(c)?).data(b)
    }
}

fn check_shape(name: &str, data: &TrainingSet, problem: &Problem) -> CliResult<()> {
    let d = problem.signal_dim();
    if data.truth_dim() != d || data.observation_dim() != d {
        return Err(CliError::Data(format!(
            "{name} holds {}x{} pairs but the configured problem has dimension {d}",
            data.observation_dim(),
            data.truth_dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SplitSummary {
    pub name: &'static str,
    pub shape: (usize, usize),
    pub noise_min: f64,
    pub noise_mean: f64,
    pub noise_max: f64,
}

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub splits: Vec<SplitSummary>,
}

impl fmt::Display for GenSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.splits {
            writeln!(
                f,
                "{}: B and C are {}x{}; noise ratio min {:.6e} mean {:.6e} max {:.6e}",
                s.name, s.shape.0, s.shape.1, s.noise_min, s.noise_mean, s.noise_max
            )?;
        }
        Ok(())
    }
}

/// Draws the training and validation splits and writes their containers.
pub fn cmd_gen(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<GenSummary> {
    opts.ensure_dir()?;
    let data = cfg.problem.dataset(cfg.train_k, cfg.val_k, cfg.seed).data("gen")?;
    let mut splits = Vec::new();
    for (name, set, b, c) in [
        ("train", &data.train, TRAIN_B, TRAIN_C),
        ("val", &data.val, VAL_B, VAL_C),
    ] {
        opts.write_matrix(b, set.observations())?;
        opts.write_matrix(c, set.truths())?;
        let clean = &data.forward * set.truths();
        let ratios = noise_ratios(&clean, set.observations());
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
            (lo.min(r), hi.max(r))
        });
        splits.push(SplitSummary {
            name,
            shape: set.observations().shape(),
            noise_min: lo,
            noise_mean: ratios.iter().sum::<f64>() / ratios.len() as f64,
            noise_max: hi,
        });
    }
    Ok(GenSummary { splits })
}

/// Run metadata stored next to a trained operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetadata {
    pub solver: String,
    pub measure: String,
    pub rank: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub wall_time_s: f64,
    pub train_error: f64,
}

pub struct Trained {
    pub operator: LowRankInverse,
    pub history: Option<UpdateHistory>,
}

/// Fits the configured solver on `train`.
pub fn fit(cfg: &ExperimentConfig, train: &TrainingSet, summation: Summation) -> CliResult<Trained> {
    let solved = |op: LowRankInverse| Trained {
        operator: op,
        history: None,
    };
    let forward = || cfg.problem.forward().data("forward model");
    Ok(match &cfg.solver {
        SolverConfig::Orim(s) => {
            let measure = s.measure.build().map_err(|e| ConfigError {
                field: "solver.measure".into(),
                message: e.to_string(),
            })?;
            match &s.update {
                None => solved(
                    Orim2Solver::new(train)
                        .and_then(|o| o.at_rank(s.rank))
                        .solver("closed form")?
                        .operator,
                ),
                Some(spec) => {
                    let ucfg = spec.build(s.rank, &measure, summation);
                    let (op, history) = rank_update_solve(train, &measure, &ucfg, derive_seed(cfg.seed, SOLVER_TAG))
                        .solver("rank update")?;
                    Trained {
                        operator: op,
                        history: Some(history),
                    }
                }
            }
        }
        SolverConfig::TsvdA(s) => solved(tsvd_known_a(&forward()?, s.rank).solver("tsvd")?),
        SolverConfig::TsvdAhat(s) => {
            let est = estimate_a(train, s.r_bar, &ErrorMeasure::squared()).solver("estimate A")?;
            solved(tsvd_estimated_a(&est, s.rank).solver("tsvd of estimated A")?)
        }
        SolverConfig::BayesOracle(s) => {
            let a = forward()?;
            let (m, eta) = match s.prior {
                PriorConfig::White { beta, eta } => (DMatrix::identity(a.ncols(), a.ncols()) * beta, eta),
                PriorConfig::Empirical => empirical_prior(&a, train)?,
            };
            solved(bayes_opt_rank(&a, &m, eta, s.rank).solver("bayes oracle")?.operator)
        }
    })
}

/// Cholesky factor of the truths' second moment and the RMS noise of `B - A C`.
fn empirical_prior(a: &DMatrix<f64>, train: &TrainingSet) -> CliResult<(DMatrix<f64>, f64)> {
    let k = train.len() as f64;
    let c = train.truths();
    let mut s = c * c.transpose() / k;
    let n = s.nrows();
    // a tiny ridge keeps the factor defined for rank-deficient training sets
    let ridge = 1e-10 * s.trace().max(f64::MIN_POSITIVE) / n as f64;
    for i in 0..n {
        s[(i, i)] += ridge;
    }
    let chol = s
        .cholesky()
        .ok_or_else(|| CliError::Solver("empirical prior: second moment is not positive definite".into()))?;
    let resid = train.observations() - a * c;
    let eta = (resid.norm_squared() / (resid.len() as f64)).sqrt();
    Ok((chol.l(), eta))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub meta: RunMetadata,
    pub x_shape: (usize, usize),
    pub y_shape: (usize, usize),
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} rank {} ({}): X {}x{}, Y {}x{}, training error {:.6e}, {:.2} s",
            self.meta.solver,
            self.meta.rank,
            self.meta.measure,
            self.x_shape.0,
            self.x_shape.1,
            self.y_shape.0,
            self.y_shape.1,
            self.meta.train_error,
            self.meta.wall_time_s
        )
    }
}

/// Fits the configured solver on the stored training split.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<TrainSummary> {
    opts.ensure_dir()?;
    let train = opts.read_set(TRAIN_B, TRAIN_C)?;
    check_shape("training split", &train, &cfg.problem)?;
    let start = Instant::now();
    let fitted = fit(cfg, &train, opts.summation)?;
    let wall = start.elapsed().as_secs_f64();
    let measure = cfg.solver.measure().build().expect("validated measure");
    let train_error = sample_mean_error(&measure, &fitted.operator, &train, opts.summation)
        .solver("training error")?
        .mean;

    let op = &fitted.operator;
    opts.write_matrix(OP_X, op.x())?;
    opts.write_matrix(OP_Y, op.y())?;
    if let Some(h) = &fitted.history {
        opts.write_text(HISTORY, &h.to_csv())?;
    }
    let meta = RunMetadata {
        solver: cfg.solver.name().to_string(),
        measure: measure.to_string(),
        rank: op.rank(),
        seed: cfg.seed,
        deterministic: opts.summation == Summation::Ordered,
        wall_time_s: wall,
        train_error,
    };
    opts.write_text(TRAIN_META, &toml::to_string(&meta).expect("metadata serializes"))?;
    Ok(TrainSummary {
        meta,
        x_shape: op.x().shape(),
        y_shape: op.y().shape(),
    })
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: LabeledReport,
    pub written: Vec<PathBuf>,
}

impl fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.report.report;
        writeln!(
            f,
            "{} on {} validation samples: mean {:.6e}, median {:.6e}, IQR [{:.6e}, {:.6e}], {} outliers",
            self.report.measure,
            r.per_sample.len(),
            r.mean,
            r.median,
            r.p25,
            r.p75,
            r.outliers.len()
        )?;
        for p in &self.written {
            writeln!(f, "  wrote {}", p.display())?;
        }
        Ok(())
    }
}

fn sample_errors_csv(per_sample: &[f64]) -> String {
    let mut out = String::from("sample,error\n");
    for (k, e) in per_sample.iter().enumerate() {
        out.push_str(&format!("{k},{e:.17e}\n"));
    }
    out
}

/// Evaluates the stored operator on the validation split.
pub fn cmd_eval(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<EvalSummary> {
    opts.ensure_dir()?;
    let op = LowRankInverse::from_factors(opts.read_matrix(OP_X)?, opts.read_matrix(OP_Y)?).data("operator")?;
    let val = opts.read_set(VAL_B, VAL_C)?;
    check_shape("validation split", &val, &cfg.problem)?;
    let measure = cfg.eval_measure();
    let summation = opts.summation;

    let report = error_report(&op, &val, &measure, summation).data("eval")?;
    let labeled = LabeledReport {
        method: cfg.solver.name().to_string(),
        measure: measure.to_string(),
        rank: op.rank(),
        report,
    };
    let mut written = vec![
        opts.write_text(REPORT, &reports_csv(std::slice::from_ref(&labeled)))?,
        opts.write_text(SAMPLE_ERRORS, &sample_errors_csv(&labeled.report.per_sample))?,
    ];
    if opts.svg {
        let svg = box_chart(
            "validation errors",
            &labeled.measure,
            &[(labeled.method.as_str(), &labeled.report)],
        );
        written.push(opts.write_text("report.svg", &svg)?);
    }

    if !cfg.eval.sweep_ranks.is_empty() {
        if let Some(&r) = cfg.eval.sweep_ranks.iter().find(|&&r| r > op.rank()) {
            return Err(CliError::Data(format!(
                "sweep rank {r} exceeds the stored operator's rank {}",
                op.rank()
            )));
        }
        let train = opts.read_set(TRAIN_B, TRAIN_C)?;
        let sweep = rank_sweep(
            |r| Ok(op.leading(r)),
            &train,
            &val,
            &measure,
            &cfg.eval.sweep_ranks,
            summation,
        )
        .data("sweep")?;
        written.push(opts.write_text(SWEEP, &sweep.to_csv())?);
        if opts.svg {
            let pts = |ys: &[f64]| sweep.ranks.iter().zip(ys).map(|(&r, &e)| (r as f64, e)).collect();
            let series = [
                Series {
                    label: "train",
                    points: pts(&sweep.train_error),
                },
                Series {
                    label: "validation",
                    points: pts(&sweep.val_error),
                },
            ];
            written.push(opts.write_text(
                "sweep.svg",
                &line_chart("rank sweep", "rank", "sample mean error", &series, true),
            )?);
        }
    }

    if !cfg.eval.pareto_k.is_empty() {
        let table = pareto(
            &cfg.problem,
            &cfg.eval.pareto_k,
            &val,
            cfg.solver.rank(),
            cfg.seed,
            summation,
        )
        .solver("pareto")?;
        written.push(opts.write_text(PARETO, &table.to_csv())?);
        if opts.svg {
            written.push(opts.write_text("pareto.svg", &pareto_svg(&table))?);
        }
    }

    if cfg.eval.density_bins > 0 {
        let hist = density(&labeled.report.per_sample, cfg.eval.density_bins).data("density")?;
        written.push(opts.write_text(DENSITY, &hist.to_csv())?);
        if opts.svg {
            let svg = density_chart("error density", &labeled.measure, &[(labeled.method.as_str(), &hist)]);
            written.push(opts.write_text("density.svg", &svg)?);
        }
    }
    Ok(EvalSummary {
        report: labeled,
        written,
    })
}

fn pareto_svg(table: &orim_core::evalstats::ParetoTable) -> String {
    let col = |f: fn(&orim_core::evalstats::ParetoRow) -> f64| table.rows.iter().map(|r| (r.k as f64, f(r))).collect();
    let series = [
        Series {
            label: "train median",
            points: col(|r| r.train.median),
        },
        Series {
            label: "validation median",
            points: col(|r| r.val.median),
        },
        Series {
            label: "validation p75",
            points: col(|r| r.val.p75),
        },
    ];
    line_chart("Pareto curve", "K", "error", &series, true)
}

fn sweeps_svg(title: &str, s: &MethodSweeps) -> String {
    let pts = |sw: &orim_core::RankSweep| {
        sw.ranks
            .iter()
            .zip(&sw.val_error)
            .map(|(&r, &e)| (r as f64, e))
            .collect()
    };
    let series = [
        Series {
            label: "ORIM2",
            points: pts(&s.orim2),
        },
        Series {
            label: "TSVD-A",
            points: pts(&s.tsvd_a),
        },
        Series {
            label: "TSVD-Ahat",
            points: pts(&s.tsvd_ahat),
        },
    ];
    line_chart(title, "rank", "validation sample mean error", &series, true)
}

fn boxes_svg(title: &str, reports: &[LabeledReport]) -> String {
    let labels: Vec<String> = reports
        .iter()
        .map(|r| format!("{} ({})", r.method, r.measure))
        .collect();
    let boxes: Vec<(&str, &orim_core::ErrorReport)> = labels
        .iter()
        .map(String::as_str)
        .zip(reports.iter().map(|r| &r.report))
        .collect();
    box_chart(title, "sample error", &boxes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    Exp1,
    Exp2,
    Exp3,
}

/// Runs one experiment at `scale` and writes its tables and charts.
pub fn cmd_reproduce(experiment: Experiment, scale: f64, seed: u64, opts: &RunOptions) -> CliResult<Vec<PathBuf>> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(ConfigError {
            field: "--scale".into(),
            message: format!("must be in (0, 1], got {scale}"),
        }
        .into());
    }
    opts.ensure_dir()?;
    let summation = opts.summation;
    let mut written = Vec::new();
    match experiment {
        Experiment::Exp1 => {
            let cfg = Exp1Config::at_scale(scale, seed);
            written.push(opts.write_text("exp1_config.toml", &toml::to_string(&cfg).expect("config serializes"))?);
            let rep = exp1(&cfg, summation).solver("exp1")?;
            written.push(opts.write_text("exp1_sweeps.csv", &rep.sweeps.to_csv())?);
            written.push(opts.write_text("exp1_boxes.csv", &reports_csv(&rep.boxes))?);
            if let Some(p) = &rep.pareto {
                written.push(opts.write_text("exp1_pareto.csv", &p.to_csv())?);
                if opts.svg {
                    written.push(opts.write_text("exp1_pareto.svg", &pareto_svg(p))?);
                }
            }
            if opts.svg {
                written.push(opts.write_text("exp1_sweeps.svg", &sweeps_svg("Experiment 1", &rep.sweeps))?);
                written.push(opts.write_text("exp1_boxes.svg", &boxes_svg("Experiment 1", &rep.boxes))?);
            }
        }
        Experiment::Exp2 => {
            let cfg = Exp2Config::at_scale(scale, seed);
            written.push(opts.write_text("exp2_config.toml", &toml::to_string(&cfg).expect("config serializes"))?);
            let rep = exp2(&cfg, summation).solver("exp2")?;
            for t in &rep.operators {
                let tag = p_label(t.p);
                opts.write_matrix(&format!("exp2_{tag}_X.orim"), t.operator.x())?;
                opts.write_matrix(&format!("exp2_{tag}_Y.orim"), t.operator.y())?;
                written.push(opts.path(&format!("exp2_{tag}_X.orim")));
                written.push(opts.path(&format!("exp2_{tag}_Y.orim")));
                if let Some(h) = &t.history {
                    written.push(opts.write_text(&format!("exp2_{tag}_history.csv"), &h.to_csv())?);
                }
            }
            written.push(opts.write_text("exp2_cross.csv", &rep.cross_csv())?);
            written.push(opts.write_text("exp2_boxes.csv", &reports_csv(&rep.boxes))?);
            written.push(opts.write_text("exp2_abs_errors.csv", &abs_errors_csv(&rep.abs_errors))?);
            if opts.svg {
                for &p in &cfg.p_values {
                    let tag = p_label(p);
                    let subset: Vec<LabeledReport> = rep.boxes.iter().filter(|b| b.measure == tag).cloned().collect();
                    written.push(opts.write_text(
                        &format!("exp2_boxes_{tag}.svg"),
                        &boxes_svg(&format!("errors under {tag}"), &subset),
                    )?);
                }
            }
        }
        Experiment::Exp3 => {
            let cfg = Exp3Config::at_scale(scale, seed);
            written.push(opts.write_text("exp3_config.toml", &toml::to_string(&cfg).expect("config serializes"))?);
            let rep = exp3(&cfg, summation).solver("exp3")?;
            written.push(opts.write_text("exp3_sweeps.csv", &rep.sweeps.to_csv())?);
            written.push(opts.write_text("exp3_density.csv", &densities_csv(&rep.densities))?);
            written.push(opts.write_text("exp3_boxes.csv", &reports_csv(&rep.boxes))?);
            written.push(opts.write_text("exp3_abs_errors.csv", &abs_errors_csv(&rep.abs_errors))?);
            if opts.svg {
                written.push(opts.write_text("exp3_sweeps.svg", &sweeps_svg("Experiment 3", &rep.sweeps))?);
                let hists: Vec<_> = rep.densities.iter().map(|(n, h)| (n.as_str(), h)).collect();
                written.push(opts.write_text(
                    "exp3_density.svg",
                    &density_chart("Experiment 3", "sample error", &hists),
                )?);
                written.push(opts.write_text("exp3_boxes.svg", &boxes_svg("Experiment 3", &rep.boxes))?);
            }
        }
    }
    Ok(written)
}

/// Output directory: `--out` wins over `outputs.dir`.
pub fn resolve_out(cli: Option<&Path>, cfg: Option<&ExperimentConfig>) -> CliResult<PathBuf> {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.outputs.dir.clone()))
        .ok_or_else(|| {
            ConfigError {
                field: "outputs.dir".into(),
                message: "no output directory; set outputs.dir or pass --out".into(),
            }
            .into()
        })
}
