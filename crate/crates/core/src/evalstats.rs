//! Applying trained operators to validation data and summarizing the errors.

use nalgebra::DMatrix;

use crate::datagen::derive_seed;
use crate::error::{check_dims, OrimError, Result};
use crate::model::{sample_mean_error, ErrorMeasure, LinearOperator, LowRankInverse, Summation, TrainingSet};

/// Reconstructions `X (Y^T B)` for every column of `b`.
pub fn apply_operator(op: &LowRankInverse, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims("observations", (op.y().nrows(), b.ncols()), b.shape())?;
    op.apply(b)
}

/// Type-7 quantile (linear interpolation between order statistics) of a
/// sorted, nonempty slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and quartiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        let sorted = sorted_finite(values)?;
        Ok(Quartiles {
            p25: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            p75: quantile_sorted(&sorted, 0.75),
        })
    }
}

fn sorted_finite(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(OrimError::Empty("error values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(OrimError::NonFinite("error values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// Per-sample errors with box-plot statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    /// Most extreme values within 1.5 IQR of the quartiles.
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<(usize, f64)>,
}

impl ErrorReport {
    /// Statistics of `per_sample` with a precomputed mean.
    pub fn from_values(per_sample: Vec<f64>, mean: f64) -> Result<Self> {
        let sorted = sorted_finite(&per_sample)?;
        let p25 = quantile_sorted(&sorted, 0.25);
        let median = quantile_sorted(&sorted, 0.5);
        let p75 = quantile_sorted(&sorted, 0.75);
        let iqr = p75 - p25;
        let (fence_lo, fence_hi) = (p25 - 1.5 * iqr, p75 + 1.5 * iqr);
        let inside = sorted.iter().copied().filter(|v| *v >= fence_lo && *v <= fence_hi);
        let whisker_lo = inside.clone().fold(f64::INFINITY, f64::min);
        let whisker_hi = inside.fold(f64::NEG_INFINITY, f64::max);
        let outliers = per_sample
            .iter()
            .enumerate()
            .filter(|(_, v)| **v < fence_lo || **v > fence_hi)
            .map(|(i, v)| (i, *v))
            .collect();
        Ok(ErrorReport {
            per_sample,
            mean,
            median,
            p25,
            p75,
            whisker_lo,
            whisker_hi,
            outliers,
        })
    }

    pub fn quartiles(&self) -> Quartiles {
        Quartiles {
            p25: self.p25,
            median: self.median,
            p75: self.p75,
        }
    }
}

pub fn error_report<O: LinearOperator + ?Sized>(
    op: &O,
    validation: &TrainingSet,
    measure: &ErrorMeasure,
    summation: Summation,
) -> Result<ErrorReport> {
    if validation.is_empty() {
        return Err(OrimError::Empty("validation set"));
    }
    let errs = sample_mean_error(measure, op, validation, summation)?;
    ErrorReport::from_values(errs.per_sample, errs.mean)
}

/// Training and validation sample mean error for a range of ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSweep {
    pub ranks: Vec<usize>,
    pub train_error: Vec<f64>,
    pub val_error: Vec<f64>,
}

impl RankSweep {
    fn argmin(ranks: &[usize], values: &[f64]) -> usize {
        let mut best = 0;
        for (i, v) in values.iter().enumerate() {
            if *v < values[best] {
                best = i;
            }
        }
        ranks[best]
    }

    /// Rank with the smallest training error (smallest rank on ties).
    pub fn train_argmin(&self) -> usize {
        Self::argmin(&self.ranks, &self.train_error)
    }

    pub fn val_argmin(&self) -> usize {
        Self::argmin(&self.ranks, &self.val_error)
    }

    pub fn to_csv(&self) -> String {
        let best = self.train_argmin();
        let mut out = String::from("rank,train_error,val_error,train_argmin\n");
        for ((r, t), v) in self.ranks.iter().zip(&self.train_error).zip(&self.val_error) {
            out.push_str(&format!("{r},{t:.17e},{v:.17e},{}\n", (*r == best) as u8));
        }
        out
    }
}

/// Evaluates `family(r)` on both sets for every rank.
pub fn rank_sweep<O, F>(
    family: F,
    train: &TrainingSet,
    validation: &TrainingSet,
    measure: &ErrorMeasure,
    ranks: &[usize],
    summation: Summation,
) -> Result<RankSweep>
where
    O: LinearOperator,
    F: Fn(usize) -> Result<O>,
{
    if ranks.is_empty() {
        return Err(OrimError::Empty("rank list"));
    }
    if ranks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(OrimError::InvalidParameter("ranks must be strictly increasing".into()));
    }
    let mut sweep = RankSweep {
        ranks: ranks.to_vec(),
        train_error: Vec::with_capacity(ranks.len()),
        val_error: Vec::with_capacity(ranks.len()),
    };
    for &r in ranks {
        let op = family(r)?;
        sweep
            .train_error
            .push(sample_mean_error(measure, &op, train, summation)?.mean);
        sweep
            .val_error
            .push(sample_mean_error(measure, &op, validation, summation)?.mean);
    }
    Ok(sweep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRow {
    pub k: usize,
    pub rank: usize,
    pub train: Quartiles,
    pub val: Quartiles,
    /// Mean of `rho(xi)` over the training signals, for relative scales.
    pub signal_energy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParetoTable {
    pub rows: Vec<ParetoRow>,
}

impl ParetoTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("k,rank,train_median,train_p25,train_p75,val_median,val_p25,val_p75,signal_energy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.k,
                r.rank,
                r.train.median,
                r.train.p25,
                r.train.p75,
                r.val.median,
                r.val.p25,
                r.val.p75,
                r.signal_energy
            ));
        }
        out
    }
}

/// `r = K` below the cap, `r_cap` from there on.
pub fn pareto_rank(k: usize, r_cap: usize) -> usize {
    if k < r_cap {
        k
    } else {
        r_cap
    }
}

/// Training-set-size study. For each `K`, `sampler(K, seed_K)` draws a
/// training set and `solver(train, rank)` fits an operator whose errors on
/// the training set and on `validation` are summarized.
#[allow(clippy::too_many_arguments)]
pub fn pareto_curve<O, S, B>(
    sampler: S,
    solver: B,
    k_values: &[usize],
    validation: &TrainingSet,
    measure: &ErrorMeasure,
    r_cap: usize,
    seed: u64,
    summation: Summation,
) -> Result<ParetoTable>
where
    O: LinearOperator,
    S: Fn(usize, u64) -> Result<TrainingSet>,
    B: Fn(&TrainingSet, usize) -> Result<O>,
{
    if k_values.is_empty() {
        return Err(OrimError::Empty("training sizes"));
    }
    if k_values.windows(2).any(|w| w[1] <= w[0]) || k_values[0] == 0 {
        return Err(OrimError::InvalidParameter(
            "training sizes must be positive and increasing".into(),
        ));
    }
    if r_cap == 0 {
        return Err(OrimError::InvalidParameter("rank cap must be positive".into()));
    }
    let mut table = ParetoTable::default();
    for &k in k_values {
        let train = sampler(k, derive_seed(seed, k as u64))?;
        let rank = pareto_rank(k, r_cap);
        let op = solver(&train, rank)?;
        let tr = sample_mean_error(measure, &op, &train, summation)?;
        let va = sample_mean_error(measure, &op, validation, summation)?;
        let energy = measure.column_values(train.truths(), summation)?;
        table.rows.push(ParetoRow {
            k,
            rank,
            train: Quartiles::of(&tr.per_sample)?,
            val: Quartiles::of(&va.per_sample)?,
            signal_energy: summation.sum(&energy) / k as f64,
        });
    }
    Ok(table)
}

/// Normalized histogram: `mass` sums to 1 and `density * width` integrates to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lo,hi,mass,density\n");
        for (i, (m, d)) in self.mass.iter().zip(&self.density).enumerate() {
            out.push_str(&format!(
                "{i},{:.17e},{:.17e},{m:.17e},{d:.17e}\n",
                self.edges[i],
                self.edges[i + 1]
            ));
        }
        out
    }
}

/// Equal-width histogram over `[min, max]`; a constant input gets a unit-wide
/// range centered on its value.
pub fn density(errors: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(OrimError::InvalidParameter("bins must be >= 1".into()));
    }
    let sorted = sorted_finite(errors)?;
    let (mut lo, mut hi) = (sorted[0], sorted[sorted.len() - 1]);
    if hi <= lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + i as f64 * width })
        .collect();
    let mut counts = vec![0usize; bins];
    for &v in errors {
        let idx = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let total = errors.len() as f64;
    let mass: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let density = mass.iter().map(|m| m / width).collect();
    Ok(Histogram { edges, mass, density })
}
