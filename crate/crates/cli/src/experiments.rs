//! End-to-end pipelines behind `orim reproduce`.
//!
//! Every experiment draws its training and validation sets from independent
//! seed streams, fits ORIM and the TSVD baselines, and returns the tables the
//! report writer turns into CSV files.

use nalgebra::DMatrix;
use orim_core::baselines::{estimate_a, opt_rank, tsvd_estimated_a, EstimatedForward, TsvdFamily};
use orim_core::datagen::{
    build_conv_matrix_1d, build_training_set, derive_seed, CircleParams, Circles2D, ForwardModel2D, NoiseSpec,
    PiecewiseConstant1D, SignalGenerator,
};
use orim_core::evalstats::{density, error_report, pareto_curve, rank_sweep, Histogram, ParetoTable, RankSweep};
use orim_core::rankupdate::{rank_update_solve, UpdateConfig, UpdateHistory};
use orim_core::{
    ErrorMeasure, ErrorReport, LinearOperator, LowRankInverse, Orim2Solver, Result, Summation, TrainingSet,
};
use serde::{Deserialize, Serialize};

const TRAIN_TAG: u64 = 0x7124;
const VAL_TAG: u64 = 0x7A1;
const PARETO_TAG: u64 = 0x9A2E;
pub(crate) const SOLVER_TAG: u64 = 0x501;

/// Smallest sizes at which the experiments keep their qualitative behavior.
pub const MIN_SIGNAL_LEN: usize = 30;
pub const MIN_SIDE: usize = 16;
pub const MIN_SAMPLES: usize = 10;

/// 1D deconvolution with piecewise-constant signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deconv1D {
    pub n: usize,
    pub kernel_variance: f64,
    pub noise: f64,
}

/// 2D deblurring of circle images with reflexive boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deblur2D {
    pub side: usize,
    pub psf_variance: f64,
    /// Per-sample noise level drawn uniformly from `[lo, hi]`.
    pub noise_range: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Problem {
    Deconv1d(Deconv1D),
    Deblur2d(Deblur2D),
}

/// A forward operator together with seeded training and validation splits.
pub struct Dataset {
    pub forward: DMatrix<f64>,
    pub train: TrainingSet,
    pub val: TrainingSet,
}

impl Problem {
    pub fn signal_dim(&self) -> usize {
        match self {
            Problem::Deconv1d(p) => p.n,
            Problem::Deblur2d(p) => p.side * p.side,
        }
    }

    fn parts(&self) -> Result<(Box<dyn SignalGenerator>, DMatrix<f64>, NoiseSpec)> {
        Ok(match self {
            Problem::Deconv1d(p) => (
                Box::new(PiecewiseConstant1D { n: p.n }),
                build_conv_matrix_1d(p.n, p.kernel_variance)?.matrix,
                NoiseSpec::fixed(p.noise, 0),
            ),
            Problem::Deblur2d(p) => (
                Box::new(Circles2D {
                    side: p.side,
                    params: CircleParams::for_side(p.side),
                }),
                ForwardModel2D::new(p.side, p.psf_variance)?.to_dense(),
                NoiseSpec::range(p.noise_range[0], p.noise_range[1], 0),
            ),
        })
    }

    /// Dense forward matrix.
    pub fn forward(&self) -> Result<DMatrix<f64>> {
        Ok(self.parts()?.1)
    }

    /// A training set of `count` pairs drawn with `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<TrainingSet> {
        let (generator, forward, noise) = self.parts()?;
        build_training_set(generator.as_ref(), &forward, &noise, count, seed)
    }

    /// Training and validation splits on independent seed streams.
    pub fn dataset(&self, k_train: usize, k_val: usize, seed: u64) -> Result<Dataset> {
        let (generator, forward, noise) = self.parts()?;
        let train = build_training_set(
            generator.as_ref(),
            &forward,
            &noise,
            k_train,
            derive_seed(seed, TRAIN_TAG),
        )?;
        let val = build_training_set(generator.as_ref(), &forward, &noise, k_val, derive_seed(seed, VAL_TAG))?;
        Ok(Dataset { forward, train, val })
    }
}

/// Box-plot statistics of one operator on the validation set.
#[derive(Debug, Clone)]
pub struct LabeledReport {
    pub method: String,
    pub measure: String,
    pub rank: usize,
    pub report: ErrorReport,
}

/// Validation sample mean error curves of the three methods over common ranks.
#[derive(Debug, Clone)]
pub struct MethodSweeps {
    pub orim2: RankSweep,
    pub tsvd_a: RankSweep,
    pub tsvd_ahat: RankSweep,
}

impl MethodSweeps {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,rank,train_error,val_error,train_argmin\n");
        for (name, s) in [
            ("orim2", &self.orim2),
            ("tsvd_a", &self.tsvd_a),
            ("tsvd_ahat", &self.tsvd_ahat),
        ] {
            let best = s.train_argmin();
            for i in 0..s.ranks.len() {
                out.push_str(&format!(
                    "{name},{},{:.17e},{:.17e},{}\n",
                    s.ranks[i],
                    s.train_error[i],
                    s.val_error[i],
                    (s.ranks[i] == best) as u8
                ));
            }
        }
        out
    }
}

/// Absolute reconstruction errors `|Z b - xi|` for a few validation samples,
/// one column per sample.
#[derive(Debug, Clone)]
pub struct AbsErrors {
    pub method: String,
    pub samples: Vec<usize>,
    pub values: DMatrix<f64>,
}

pub fn abs_errors<O: LinearOperator>(method: &str, op: &O, val: &TrainingSet, count: usize) -> Result<AbsErrors> {
    let count = count.min(val.len());
    let head = val.head(count)?;
    let values = (op.apply(head.observations())? - head.truths()).abs();
    Ok(AbsErrors {
        method: method.to_string(),
        samples: (0..count).collect(),
        values,
    })
}

pub fn abs_errors_csv(tables: &[AbsErrors]) -> String {
    let mut out = String::from("method,sample,index,abs_error\n");
    for t in tables {
        for (c, k) in t.samples.iter().enumerate() {
            for i in 0..t.values.nrows() {
                out.push_str(&format!("{},{k},{i},{:.17e}\n", t.method, t.values[(i, c)]));
            }
        }
    }
    out
}

pub fn reports_csv(reports: &[LabeledReport]) -> String {
    let mut out = String::from("method,measure,rank,mean,median,p25,p75,whisker_lo,whisker_hi,outliers\n");
    for r in reports {
        let e = &r.report;
        out.push_str(&format!(
            "{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
            r.method,
            r.measure,
            r.rank,
            e.mean,
            e.median,
            e.p25,
            e.p75,
            e.whisker_lo,
            e.whisker_hi,
            e.outliers.len()
        ));
    }
    out
}

fn sweeps(
    data: &Dataset,
    r_bar: usize,
    ranks: &[usize],
    summation: Summation,
) -> Result<(MethodSweeps, Orim2Solver, TsvdFamily, EstimatedForward)> {
    let measure = ErrorMeasure::squared();
    let orim = Orim2Solver::new(&data.train)?;
    let tsvd = TsvdFamily::new(&data.forward)?;
    let est = estimate_a(&data.train, r_bar, &measure)?;
    let sweeps = MethodSweeps {
        orim2: rank_sweep(
            |r| orim.at_rank(r).map(|s| s.operator),
            &data.train,
            &data.val,
            &measure,
            ranks,
            summation,
        )?,
        tsvd_a: rank_sweep(|r| tsvd.at_rank(r), &data.train, &data.val, &measure, ranks, summation)?,
        tsvd_ahat: {
            let top = est.rank().min(r_bar);
            let usable: Vec<usize> = ranks.iter().copied().filter(|&r| r <= top).collect();
            rank_sweep(
                |r| tsvd_estimated_a(&est, r),
                &data.train,
                &data.val,
                &measure,
                &usable,
                summation,
            )?
        },
    };
    Ok((sweeps, orim, tsvd, est))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exp1Config {
    pub problem: Deconv1D,
    pub k_train: usize,
    pub k_val: usize,
    /// Rank of the estimated forward operator.
    pub r_bar: usize,
    pub ranks: Vec<usize>,
    pub pareto_k: Vec<usize>,
    pub r_cap: usize,
    pub seed: u64,
}

fn scaled(full: usize, scale: f64, floor: usize) -> usize {
    ((full as f64 * scale).round() as usize).max(floor)
}

impl Exp1Config {
    /// Full-size setup shrunk by `scale`: `n = max(30, 150 scale)`, `K = 10 n`,
    /// ranks up to `2n/3`, Pareto cap `n/3`.
    pub fn at_scale(scale: f64, seed: u64) -> Self {
        let n = scaled(150, scale, MIN_SIGNAL_LEN);
        let k = (10 * n).max(MIN_SAMPLES);
        let r_max = (2 * n).div_ceil(3);
        let pareto_k = [1.0 / 12.0, 1.0 / 6.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|f| ((f * n as f64).round() as usize).max(1))
            .collect();
        Exp1Config {
            problem: Deconv1D {
                n,
                kernel_variance: 2.0,
                noise: 0.01,
            },
            k_train: k,
            k_val: k,
            r_bar: (100 * n).div_ceil(150),
            ranks: (1..=r_max).collect(),
            pareto_k,
            r_cap: n / 3,
            seed,
        }
    }
}

pub struct Exp1Report {
    pub sweeps: MethodSweeps,
    pub boxes: Vec<LabeledReport>,
    pub pareto: Option<ParetoTable>,
}

/// Pareto study for ORIM_2: fresh training sets of each size, rank `min(K, r_cap)`.
pub fn pareto(
    problem: &Problem,
    k_values: &[usize],
    val: &TrainingSet,
    r_cap: usize,
    seed: u64,
    summation: Summation,
) -> Result<ParetoTable> {
    let sampler = |k: usize, s: u64| problem.sample(k, s);
    let solver = |t: &TrainingSet, r: usize| Orim2Solver::new(t)?.at_rank(r).map(|s| s.operator);
    pareto_curve(
        sampler,
        solver,
        k_values,
        val,
        &ErrorMeasure::squared(),
        r_cap,
        derive_seed(seed, PARETO_TAG),
        summation,
    )
}

pub fn exp1(cfg: &Exp1Config, summation: Summation) -> Result<Exp1Report> {
    let problem = Problem::Deconv1d(cfg.problem);
    let data = problem.dataset(cfg.k_train, cfg.k_val, cfg.seed)?;
    log::info!("exp1: n={} K={} Kval={}", cfg.problem.n, cfg.k_train, cfg.k_val);
    let (sweeps, orim, tsvd, est) = sweeps(&data, cfg.r_bar, &cfg.ranks, summation)?;
    let measure = ErrorMeasure::squared();

    let r_orim = *cfg.ranks.last().expect("nonempty ranks");
    let (r_a, _) = opt_rank(
        |r| tsvd.at_rank(r),
        &data.train,
        &measure,
        &sweeps.tsvd_a.ranks,
        summation,
    )?;
    let (r_ahat, _) = opt_rank(
        |r| tsvd_estimated_a(&est, r),
        &data.train,
        &measure,
        &sweeps.tsvd_ahat.ranks,
        summation,
    )?;
    let boxes = vec![
        labeled(
            "orim2",
            "p2",
            r_orim,
            error_report(&orim.at_rank(r_orim)?.operator, &data.val, &measure, summation)?,
        ),
        labeled(
            "tsvd_a",
            "p2",
            r_a,
            error_report(&tsvd.at_rank(r_a)?, &data.val, &measure, summation)?,
        ),
        labeled(
            "tsvd_ahat",
            "p2",
            r_ahat,
            error_report(&tsvd_estimated_a(&est, r_ahat)?, &data.val, &measure, summation)?,
        ),
    ];

    let pareto = if cfg.pareto_k.is_empty() {
        None
    } else {
        log::info!("exp1: pareto over K = {:?}", cfg.pareto_k);
        Some(pareto(
            &problem,
            &cfg.pareto_k,
            &data.val,
            cfg.r_cap,
            cfg.seed,
            summation,
        )?)
    };
    Ok(Exp1Report { sweeps, boxes, pareto })
}

fn labeled(method: &str, measure: &str, rank: usize, report: ErrorReport) -> LabeledReport {
    LabeledReport {
        method: method.to_string(),
        measure: measure.to_string(),
        rank,
        report,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exp2Config {
    pub problem: Deconv1D,
    pub k_train: usize,
    pub k_val: usize,
    pub rank: usize,
    /// Increment rank of the rank-update solver; `rank` fits a single block.
    pub ell: usize,
    pub r_bar: usize,
    pub p_values: Vec<f64>,
    /// Smoothing for exponents below 2.
    pub epsilon: f64,
    /// Number of validation samples whose absolute errors are written out.
    pub shown_samples: usize,
    pub seed: u64,
}

const EXP2_SAMPLES_PER_DIM: usize = 160;

impl Exp2Config {
    pub fn at_scale(scale: f64, seed: u64) -> Self {
        // The p = 5 operator needs far more samples per unknown than the
        // quadratic one before it stops overfitting, hence the larger K.
        let base = Exp1Config::at_scale(scale, seed);
        let n = base.problem.n;
        Exp2Config {
            problem: base.problem,
            k_train: EXP2_SAMPLES_PER_DIM * n,
            k_val: EXP2_SAMPLES_PER_DIM * n,
            rank: base.r_cap,
            ell: base.r_cap,
            r_bar: base.r_bar,
            p_values: vec![1.2, 2.0, 5.0],
            epsilon: 1e-4,
            shown_samples: 4,
            seed,
        }
    }
}

pub fn p_label(p: f64) -> String {
    format!("p{p}")
}

pub struct TrainedMeasure {
    pub p: f64,
    pub operator: LowRankInverse,
    pub history: Option<UpdateHistory>,
}

pub struct Exp2Report {
    pub operators: Vec<TrainedMeasure>,
    /// Validation sample mean error of operator `i` (rows) under measure `j` (columns).
    pub cross_errors: DMatrix<f64>,
    pub boxes: Vec<LabeledReport>,
    pub abs_errors: Vec<AbsErrors>,
}

impl Exp2Report {
    pub fn cross_csv(&self) -> String {
        let mut out = String::from("trained_with,evaluated_with,val_error\n");
        for (i, op) in self.operators.iter().enumerate() {
            for (j, eval) in self.operators.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{:.17e}\n",
                    p_label(op.p),
                    p_label(eval.p),
                    self.cross_errors[(i, j)]
                ));
            }
        }
        out
    }
}

/// Measure used to train with exponent `p`; exponents below 2 are smoothed.
pub fn training_measure(p: f64, epsilon: f64) -> Result<ErrorMeasure> {
    if p == 2.0 {
        Ok(ErrorMeasure::squared())
    } else if p < 2.0 {
        ErrorMeasure::smoothed_pnorm(p, epsilon)
    } else {
        ErrorMeasure::pnorm(p)
    }
}

/// Operator minimizing the training error under `measure` at rank `rank`:
/// the closed form for the squared 2-norm, rank updates otherwise.
pub fn train_orim(
    train: &TrainingSet,
    measure: &ErrorMeasure,
    rank: usize,
    ell: usize,
    seed: u64,
) -> Result<(LowRankInverse, Option<UpdateHistory>)> {
    if measure.is_quadratic() {
        return Ok((Orim2Solver::new(train)?.at_rank(rank)?.operator, None));
    }
    let mut cfg = UpdateConfig::new(rank, measure);
    cfg.ell = ell.clamp(1, rank);
    cfg.rel_improve_tol = 1e-12;
    let (op, history) = rank_update_solve(train, measure, &cfg, derive_seed(seed, SOLVER_TAG))?;
    Ok((op, Some(history)))
}

pub fn exp2(cfg: &Exp2Config, summation: Summation) -> Result<Exp2Report> {
    let problem = Problem::Deconv1d(cfg.problem);
    let data = problem.dataset(cfg.k_train, cfg.k_val, cfg.seed)?;
    let eval_measures: Vec<ErrorMeasure> = cfg
        .p_values
        .iter()
        .map(|&p| ErrorMeasure::pnorm(p))
        .collect::<Result<_>>()?;

    let mut operators = Vec::new();
    for &p in &cfg.p_values {
        log::info!("exp2: training p={p} at rank {}", cfg.rank);
        let measure = training_measure(p, cfg.epsilon)?;
        let (operator, history) = train_orim(&data.train, &measure, cfg.rank, cfg.ell, cfg.seed)?;
        operators.push(TrainedMeasure { p, operator, history });
    }

    let est = estimate_a(&data.train, cfg.r_bar, &ErrorMeasure::squared())?;
    let hat_ranks: Vec<usize> = (1..=est.rank().min(cfg.r_bar)).collect();

    let np = cfg.p_values.len();
    let mut cross_errors = DMatrix::zeros(np, np);
    let mut boxes = Vec::new();
    for (j, measure) in eval_measures.iter().enumerate() {
        let label = p_label(cfg.p_values[j]);
        for (i, t) in operators.iter().enumerate() {
            let rep = error_report(&t.operator, &data.val, measure, summation)?;
            cross_errors[(i, j)] = rep.mean;
            boxes.push(labeled(
                &format!("orim_{}", p_label(t.p)),
                &label,
                t.operator.rank(),
                rep,
            ));
        }
        let (r_hat, _) = opt_rank(
            |r| tsvd_estimated_a(&est, r),
            &data.train,
            measure,
            &hat_ranks,
            summation,
        )?;
        let rep = error_report(&tsvd_estimated_a(&est, r_hat)?, &data.val, measure, summation)?;
        boxes.push(labeled("tsvd_ahat", &label, r_hat, rep));
    }

    let abs = operators
        .iter()
        .map(|t| {
            abs_errors(
                &format!("orim_{}", p_label(t.p)),
                &t.operator,
                &data.val,
                cfg.shown_samples,
            )
        })
        .collect::<Result<_>>()?;
    Ok(Exp2Report {
        operators,
        cross_errors,
        boxes,
        abs_errors: abs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exp3Config {
    pub problem: Deblur2D,
    pub k_train: usize,
    pub k_val: usize,
    pub r_bar: usize,
    pub ranks: Vec<usize>,
    pub bins: usize,
    pub shown_samples: usize,
    pub seed: u64,
}

impl Exp3Config {
    /// `side = max(16, 128 scale)`, `K = 500 (side/32)^2`, `r_bar = 150 side^2/1024`
    /// capped below `K`; ranks sweep up to `r_bar` in 15 steps.
    pub fn at_scale(scale: f64, seed: u64) -> Self {
        let side = scaled(128, scale, MIN_SIDE);
        let pixels = side * side;
        let k = ((500 * pixels).div_ceil(1024)).max(MIN_SAMPLES);
        let r_bar = ((150 * pixels).div_ceil(1024)).min(k / 2).max(1);
        let step = r_bar.div_ceil(15).max(1);
        let mut ranks: Vec<usize> = (1..=r_bar / step).map(|i| i * step).collect();
        if ranks.last() != Some(&r_bar) {
            ranks.push(r_bar);
        }
        Exp3Config {
            problem: Deblur2D {
                side,
                psf_variance: 5.0,
                noise_range: [0.1, 0.15],
            },
            k_train: k,
            k_val: k,
            r_bar,
            ranks,
            bins: 40,
            shown_samples: 4,
            seed,
        }
    }
}

pub struct Exp3Report {
    pub sweeps: MethodSweeps,
    pub densities: Vec<(String, Histogram)>,
    pub boxes: Vec<LabeledReport>,
    pub abs_errors: Vec<AbsErrors>,
}

pub fn densities_csv(hists: &[(String, Histogram)]) -> String {
    let mut out = String::from("method,bin,lo,hi,mass,density\n");
    for (name, h) in hists {
        for line in h.to_csv().lines().skip(1) {
            out.push_str(&format!("{name},{line}\n"));
        }
    }
    out
}

pub fn exp3(cfg: &Exp3Config, summation: Summation) -> Result<Exp3Report> {
    let problem = Problem::Deblur2d(cfg.problem);
    log::info!("exp3: side={} K={} Kval={}", cfg.problem.side, cfg.k_train, cfg.k_val);
    let data = problem.dataset(cfg.k_train, cfg.k_val, cfg.seed)?;
    let (sweeps, orim, tsvd, est) = sweeps(&data, cfg.r_bar, &cfg.ranks, summation)?;
    let measure = ErrorMeasure::squared();

    let r_top = *cfg.ranks.last().expect("nonempty ranks");
    let r_hat_top = *sweeps.tsvd_ahat.ranks.last().expect("nonempty sweep");
    let z2 = orim.at_rank(r_top)?.operator;
    let zhat = tsvd_estimated_a(&est, r_hat_top)?;
    let r_a = sweeps.tsvd_a.train_argmin();
    let za = tsvd.at_rank(r_a)?;

    let rep2 = error_report(&z2, &data.val, &measure, summation)?;
    let rep_hat = error_report(&zhat, &data.val, &measure, summation)?;
    let densities = vec![
        ("orim2".to_string(), density(&rep2.per_sample, cfg.bins)?),
        ("tsvd_ahat".to_string(), density(&rep_hat.per_sample, cfg.bins)?),
    ];
    let boxes = vec![
        labeled("orim2", "p2", r_top, rep2),
        labeled("tsvd_a", "p2", r_a, error_report(&za, &data.val, &measure, summation)?),
        labeled("tsvd_ahat", "p2", r_hat_top, rep_hat),
    ];
    let abs = vec![
        abs_errors("orim2", &z2, &data.val, cfg.shown_samples)?,
        abs_errors("tsvd_a", &za, &data.val, cfg.shown_samples)?,
        abs_errors("tsvd_ahat", &zhat, &data.val, cfg.shown_samples)?,
    ];
    Ok(Exp3Report {
        sweeps,
        densities,
        boxes,
        abs_errors: abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_floors() {
        let c = Exp1Config::at_scale(0.01, 1);
        assert_eq!(c.problem.n, MIN_SIGNAL_LEN);
        assert_eq!(c.k_train, 300);
        let c = Exp1Config::at_scale(0.4, 1);
        assert_eq!(
            (c.problem.n, c.k_train, c.ranks.len(), c.r_cap, c.r_bar),
            (60, 600, 40, 20, 40)
        );
        assert_eq!(c.pareto_k, vec![5, 10, 20, 40, 60, 120, 240, 480]);
        let c = Exp3Config::at_scale(0.25, 1);
        assert_eq!((c.problem.side, c.k_train, c.r_bar), (32, 500, 150));
        assert_eq!(*c.ranks.last().unwrap(), 150);
        assert_eq!(Exp3Config::at_scale(0.01, 1).problem.side, MIN_SIDE);
    }

    #[test]
    fn splits_are_independent_and_reproducible() {
        let p = Problem::Deconv1d(Deconv1D {
            n: 30,
            kernel_variance: 2.0,
            noise: 0.01,
        });
        let a = p.dataset(20, 20, 3).unwrap();
        let b = p.dataset(20, 20, 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_ne!(a.train.observations(), a.val.observations());
    }

    #[test]
    fn small_exp1_runs() {
        let mut cfg = Exp1Config::at_scale(0.2, 5);
        cfg.pareto_k = vec![5, 10, 40];
        let rep = exp1(&cfg, Summation::Ordered).unwrap();
        assert_eq!(rep.sweeps.orim2.ranks.len(), 20);
        assert_eq!(rep.boxes.len(), 3);
        assert_eq!(rep.pareto.unwrap().rows.len(), 3);
    }
}
