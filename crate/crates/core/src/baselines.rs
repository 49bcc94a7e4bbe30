//! Reference reconstructors: truncated SVD of a known or estimated forward
//! operator, and rank selection on training data.

use nalgebra::DMatrix;

use crate::closedform::{truncated_pinv_factors, Orim2Solver};
use crate::error::{OrimError, Result};
use crate::linalg::ThinSvd;
use crate::model::{sample_mean_error, ErrorMeasure, LinearOperator, LowRankInverse, Summation, TrainingSet};
use crate::rankupdate::{rank_update_solve, UpdateConfig};

/// TSVD reconstruction matrix `A_r^+` of a known forward operator.
pub fn tsvd_known_a(a: &DMatrix<f64>, r: usize) -> Result<LowRankInverse> {
    if r == 0 {
        return Err(OrimError::RankOutOfRange {
            context: "tsvd_known_a",
            requested: 0,
            max: a.nrows().min(a.ncols()),
        });
    }
    let svd = ThinSvd::new(a)?;
    truncated_pinv_factors(&svd, a.nrows(), a.ncols(), r, "tsvd_known_a")
}

/// Precomputed SVD of a known forward operator for sweeping TSVD ranks.
#[derive(Debug, Clone)]
pub struct TsvdFamily {
    svd: ThinSvd,
    rows: usize,
    cols: usize,
}

impl TsvdFamily {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        Ok(TsvdFamily {
            svd: ThinSvd::new(a)?,
            rows: a.nrows(),
            cols: a.ncols(),
        })
    }

    pub fn max_rank(&self) -> usize {
        self.svd.numerical_rank(self.rows, self.cols)
    }

    pub fn at_rank(&self, r: usize) -> Result<LowRankInverse> {
        if r == 0 {
            return Err(OrimError::RankOutOfRange {
                context: "tsvd",
                requested: 0,
                max: self.max_rank(),
            });
        }
        truncated_pinv_factors(&self.svd, self.rows, self.cols, r, "tsvd")
    }
}

/// Low-rank forward operator `A_hat = P Q^T` (m x n) fitted to training data,
/// together with its SVD.
#[derive(Debug, Clone)]
pub struct EstimatedForward {
    a_hat: LowRankInverse,
    r_bar: usize,
    svd: ThinSvd,
}

impl EstimatedForward {
    fn from_factors(a_hat: LowRankInverse, r_bar: usize) -> Result<Self> {
        let svd = factored_svd(a_hat.x(), a_hat.y())?;
        Ok(EstimatedForward { a_hat, r_bar, svd })
    }

    /// `A_hat` in factored form (`x`: m x k, `y`: n x k).
    pub fn factors(&self) -> &LowRankInverse {
        &self.a_hat
    }

    pub fn r_bar(&self) -> usize {
        self.r_bar
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.a_hat.to_dense()
    }

    /// Numerical rank of `A_hat`.
    pub fn rank(&self) -> usize {
        let (m, n) = (self.a_hat.x().nrows(), self.a_hat.y().nrows());
        self.svd.numerical_rank(m, n)
    }

    pub fn singular_values(&self) -> &[f64] {
        self.svd.s.as_slice()
    }
}

/// SVD of `P Q^T` from QR factorizations of the factors and an SVD of the
/// small core `R_p R_q^T`.
fn factored_svd(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<ThinSvd> {
    if p.ncols() == 0 {
        return Err(OrimError::Empty("factored matrix of rank 0"));
    }
    let qp = nalgebra::QR::new(p.clone());
    let qq = nalgebra::QR::new(q.clone());
    let core = qp.r() * qq.r().transpose();
    let small = ThinSvd::new(&core)?;
    Ok(ThinSvd {
        u: qp.q() * small.u,
        s: small.s,
        v: qq.q() * small.v,
    })
}

/// Fits `A_hat = argmin_{rank <= r_bar} (1/K) sum rho(A xi_k - b_k)` by
/// swapping the roles of observations and truths. The squared 2-norm uses
/// the closed form; other measures use rank updates with default settings.
pub fn estimate_a(data: &TrainingSet, r_bar: usize, measure: &ErrorMeasure) -> Result<EstimatedForward> {
    estimate_a_with(data, r_bar, measure, None, 0)
}

/// As [`estimate_a`] with an explicit rank-update configuration and seed for
/// non-quadratic measures.
pub fn estimate_a_with(
    data: &TrainingSet,
    r_bar: usize,
    measure: &ErrorMeasure,
    cfg: Option<&UpdateConfig>,
    seed: u64,
) -> Result<EstimatedForward> {
    if r_bar == 0 {
        return Err(OrimError::RankOutOfRange {
            context: "estimate_a",
            requested: 0,
            max: data.truth_dim().min(data.observation_dim()),
        });
    }
    measure.validate()?;
    let swapped = data.swapped();
    let a_hat = if measure.is_quadratic() {
        Orim2Solver::new(&swapped)?.at_rank(r_bar)?.operator
    } else {
        let default_cfg;
        let cfg = match cfg {
            Some(c) => c,
            None => {
                default_cfg = UpdateConfig::new(r_bar, measure);
                &default_cfg
            }
        };
        let cfg = UpdateConfig {
            r_max: r_bar,
            ell: cfg.ell.min(r_bar),
            ..cfg.clone()
        };
        rank_update_solve(&swapped, measure, &cfg, seed)?.0
    };
    EstimatedForward::from_factors(a_hat, r_bar)
}

/// TSVD reconstruction matrix `A_hat_r^+` of an estimated forward operator.
pub fn tsvd_estimated_a(est: &EstimatedForward, r: usize) -> Result<LowRankInverse> {
    let max = est.rank().min(est.r_bar);
    if r == 0 || r > max {
        return Err(OrimError::RankOutOfRange {
            context: "tsvd_estimated_a",
            requested: r,
            max,
        });
    }
    let (m, n) = (est.a_hat.x().nrows(), est.a_hat.y().nrows());
    truncated_pinv_factors(&est.svd, m, n, r, "tsvd_estimated_a")
}

/// Candidate with the smallest training sample mean error; ties go to the
/// smaller rank.
pub fn opt_rank<O, F>(
    family: F,
    train: &TrainingSet,
    measure: &ErrorMeasure,
    candidates: &[usize],
    summation: Summation,
) -> Result<(usize, f64)>
where
    O: LinearOperator,
    F: Fn(usize) -> Result<O>,
{
    if candidates.is_empty() {
        return Err(OrimError::Empty("rank candidates"));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(usize, f64)> = None;
    for r in sorted {
        let op = family(r)?;
        let f = sample_mean_error(measure, &op, train, summation)?.mean;
        if best.is_none_or(|(_, fb)| f < fb) {
            best = Some((r, f));
        }
    }
    Ok(best.expect("nonempty candidates"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedform::pinv_truncated;
    use crate::linalg::{max_abs, orthonormal_columns, pinv};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        orthonormal_columns(&randn(&mut rng, rows, cols))
    }

    #[test]
    fn tsvd_known_cases() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 0.5]));
        let z = tsvd_known_a(&a, 2).unwrap().to_dense();
        assert!(max_abs(&(z - DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0, 0.0])))) < 1e-15);

        let q = random_orthonormal(4, 4, 3);
        for r in 1..=4 {
            let z = tsvd_known_a(&q, r).unwrap().to_dense();
            let svd = ThinSvd::new(&q).unwrap();
            let vr = svd.v.columns(0, r);
            let ur = svd.u.columns(0, r);
            assert!(max_abs(&(z - vr * ur.transpose())) < 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 6, 5);
        let fam = TsvdFamily::new(&a).unwrap();
        for r in 1..=5 {
            let z = tsvd_known_a(&a, r).unwrap().to_dense();
            assert_eq!(z, pinv_truncated(&a, r).unwrap());
            assert_eq!(z, fam.at_rank(r).unwrap().to_dense());
        }
        assert!(tsvd_known_a(&a, 0).is_err());
        assert!(tsvd_known_a(&a, 6).is_err());
    }

    #[test]
    fn tsvd_inverts_on_leading_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, 7, 5);
        let svd = ThinSvd::new(&a).unwrap();
        let z = tsvd_known_a(&a, 3).unwrap().to_dense();
        for j in 0..3 {
            let v = svd.v.column(j);
            assert!((&z * &a * v - v).norm() < 1e-10);
        }
    }

    fn planted(rng: &mut ChaCha8Rng, m: usize, n: usize, rank: usize, k: usize) -> (DMatrix<f64>, TrainingSet) {
        let a0 = randn(rng, m, rank) * randn(rng, rank, n);
        let c = randn(rng, n, k);
        let b = &a0 * &c;
        (a0, TrainingSet::new(b, c).unwrap())
    }

    #[test]
    fn planted_forward_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a0, data) = planted(&mut rng, 8, 6, 3, 20);
        for r_bar in [3, 5] {
            let est = estimate_a(&data, r_bar, &ErrorMeasure::squared()).unwrap();
            assert!((est.to_dense() - &a0).norm() < 1e-6);
            assert_eq!(est.rank(), 3);
        }
        let (a1, data) = planted(&mut rng, 5, 5, 1, 10);
        let est = estimate_a(&data, 1, &ErrorMeasure::squared()).unwrap();
        assert!((est.to_dense() - a1).norm() < 1e-8);
        assert!(estimate_a(&data, 0, &ErrorMeasure::squared()).is_err());
    }

    #[test]
    fn estimated_tsvd_matches_known_tsvd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a0 = randn(&mut rng, 6, 6);
        let c = randn(&mut rng, 6, 30);
        let data = TrainingSet::new(&a0 * &c, c).unwrap();
        let est = estimate_a(&data, 6, &ErrorMeasure::squared()).unwrap();
        for r in 1..=6 {
            let hat = tsvd_estimated_a(&est, r).unwrap().to_dense();
            let known = tsvd_known_a(&a0, r).unwrap().to_dense();
            assert!((hat - known).norm() < 1e-6, "rank {r}");
        }
        assert_eq!(tsvd_estimated_a(&est, 1).unwrap().rank(), 1);
        assert!(tsvd_estimated_a(&est, 7).is_err());
    }

    #[test]
    fn estimate_objective_nonincreasing_in_rank_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = TrainingSet::new(randn(&mut rng, 6, 25), randn(&mut rng, 5, 25)).unwrap();
        let swapped = data.swapped();
        let m = ErrorMeasure::squared();
        let mut prev = f64::INFINITY;
        for r_bar in 1..=5 {
            let est = estimate_a(&data, r_bar, &m).unwrap();
            let f = sample_mean_error(&m, &est.to_dense(), &swapped, Summation::Ordered)
                .unwrap()
                .mean;
            assert!(f <= prev + 1e-12);
            prev = f;
        }
    }

    #[test]
    fn estimate_with_other_measure_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, data) = planted(&mut rng, 5, 4, 2, 30);
        let m = ErrorMeasure::pnorm(5.0).unwrap();
        let est = estimate_a(&data, 2, &m).unwrap();
        assert!(est.factors().rank() <= 2);
    }

    #[test]
    fn factored_svd_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = randn(&mut rng, 7, 3);
        let q = randn(&mut rng, 5, 3);
        let f = factored_svd(&p, &q).unwrap();
        let dense = ThinSvd::new(&(&p * q.transpose())).unwrap();
        for j in 0..3 {
            assert!((f.s[j] - dense.s[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn opt_rank_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = TrainingSet::new(randn(&mut rng, 6, 30), randn(&mut rng, 5, 30)).unwrap();
        let m = ErrorMeasure::squared();
        let solver = Orim2Solver::new(&data).unwrap();
        let cands: Vec<usize> = (1..=5).collect();
        let (r, f) = opt_rank(
            |r| solver.at_rank(r).map(|s| s.operator),
            &data,
            &m,
            &cands,
            Summation::Ordered,
        )
        .unwrap();
        assert_eq!(r, 5);
        for &c in &cands {
            let fc = sample_mean_error(&m, &solver.at_rank(c).unwrap().operator, &data, Summation::Ordered)
                .unwrap()
                .mean;
            assert!(f <= fc);
        }

        // scaled copies of the least-squares optimum; the error is minimal at scale 1 (rank 3)
        let z_opt = data.truths() * pinv(data.observations()).unwrap();
        let family = |r: usize| Ok(&z_opt * (1.0 + 0.3 * (r as f64 - 3.0).abs()));
        let (r, _) = opt_rank(family, &data, &m, &cands, Summation::Ordered).unwrap();
        assert_eq!(r, 3);

        // ties go to the smaller rank
        let (r, _) = opt_rank(
            |_| Ok(DMatrix::<f64>::zeros(5, 6)),
            &data,
            &m,
            &[4, 2, 3],
            Summation::Ordered,
        )
        .unwrap();
        assert_eq!(r, 2);
        assert!(opt_rank(|_| Ok(DMatrix::<f64>::zeros(5, 6)), &data, &m, &[], Summation::Ordered).is_err());
    }
}
