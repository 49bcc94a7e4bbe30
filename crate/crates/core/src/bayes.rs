//! Bayes-risk minimizers for the squared 2-norm when the forward model and
//! Gaussian-type prior moments are known.
//!
//! Model: `b = A xi + delta` with `A` of size m x n, `E xi = mu_xi`,
//! `Cov xi = M_xi M_xi^T`, `E delta = mu_delta`, `Cov delta = eta^2 M_delta M_delta^T`.
//! After whitening (`A <- M_delta^-1 A`, `b <- M_delta^-1 (b - mu_delta)`)
//! the noise has zero mean and covariance `eta^2 I`, and the risk of a
//! reconstruction matrix `Z` is
//! `|(ZA - I) mu_xi|^2 + |(ZA - I) M_xi|_F^2 + eta^2 |Z|_F^2`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::closedform::truncated_pinv_factors;
use crate::error::{check_dims, OrimError, Result};
use crate::linalg::{has_gap, scale_columns, ThinSvd};
use crate::model::{LowRankInverse, TrainingSet};

/// Largest accepted condition number for matrices that get inverted.
pub const MAX_CONDITION: f64 = 1e12;

/// Prior moments for signal and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesPrior {
    mu_xi: DVector<f64>,
    m_xi: DMatrix<f64>,
    mu_delta: DVector<f64>,
    m_delta: DMatrix<f64>,
    eta: f64,
    beta: f64,
}

fn check_cholesky_factor(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(OrimError::InvalidParameter(format!("{name} must be square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(OrimError::NonFinite("prior factor"));
    }
    for i in 0..m.nrows() {
        if m[(i, i)] <= 0.0 {
            return Err(OrimError::InvalidParameter(format!("{name} needs a positive diagonal")));
        }
        for j in i + 1..m.ncols() {
            if m[(i, j)] != 0.0 {
                return Err(OrimError::InvalidParameter(format!("{name} must be lower-triangular")));
            }
        }
    }
    Ok(())
}

impl BayesPrior {
    /// General prior; `m_xi` and `m_delta` must be lower-triangular with a
    /// positive diagonal. The signal scale is taken as 1.
    pub fn new(
        mu_xi: DVector<f64>,
        m_xi: DMatrix<f64>,
        mu_delta: DVector<f64>,
        m_delta: DMatrix<f64>,
        eta: f64,
    ) -> Result<Self> {
        check_cholesky_factor(&m_xi, "M_xi")?;
        check_cholesky_factor(&m_delta, "M_delta")?;
        check_dims("prior mean of xi", (m_xi.nrows(), 1), (mu_xi.len(), 1))?;
        check_dims("prior mean of delta", (m_delta.nrows(), 1), (mu_delta.len(), 1))?;
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(OrimError::InvalidParameter(format!(
                "eta must be finite and >= 0, got {eta}"
            )));
        }
        Ok(BayesPrior {
            mu_xi,
            m_xi,
            mu_delta,
            m_delta,
            eta,
            beta: 1.0,
        })
    }

    /// White prior: `xi ~ (0, beta^2 I_n)`, `delta ~ (0, eta^2 I_m)`.
    pub fn white(n: usize, m: usize, beta: f64, eta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(OrimError::InvalidParameter(format!(
                "beta must be finite and > 0, got {beta}"
            )));
        }
        let mut prior = BayesPrior::new(
            DVector::zeros(n),
            DMatrix::identity(n, n) * beta,
            DVector::zeros(m),
            DMatrix::identity(m, m),
            eta,
        )?;
        prior.beta = beta;
        Ok(prior)
    }

    pub fn mu_xi(&self) -> &DVector<f64> {
        &self.mu_xi
    }
    pub fn m_xi(&self) -> &DMatrix<f64> {
        &self.m_xi
    }
    pub fn mu_delta(&self) -> &DVector<f64> {
        &self.mu_delta
    }
    pub fn m_delta(&self) -> &DMatrix<f64> {
        &self.m_delta
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Noise-to-signal ratio `eta / beta`.
    pub fn alpha(&self) -> f64 {
        self.eta / self.beta
    }

    pub fn signal_dim(&self) -> usize {
        self.mu_xi.len()
    }

    pub fn observation_dim(&self) -> usize {
        self.mu_delta.len()
    }

    /// Zero noise mean and identity noise factor.
    pub fn is_whitened(&self) -> bool {
        self.mu_delta.iter().all(|&v| v == 0.0)
            && self.m_delta == DMatrix::identity(self.m_delta.nrows(), self.m_delta.ncols())
    }

    /// The same prior expressed in whitened coordinates.
    pub fn whitened(&self) -> Self {
        let m = self.observation_dim();
        BayesPrior {
            mu_delta: DVector::zeros(m),
            m_delta: DMatrix::identity(m, m),
            ..self.clone()
        }
    }

    /// `mu_xi mu_xi^T + M_xi M_xi^T`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.mu_xi * self.mu_xi.transpose() + &self.m_xi * self.m_xi.transpose()
    }

    /// Draws `count` pairs `(A xi + delta, xi)` from the prior.
    pub fn sample_training_set(&self, a: &DMatrix<f64>, count: usize, seed: u64) -> Result<TrainingSet> {
        let (n, m) = (self.signal_dim(), self.observation_dim());
        check_dims("forward operator", (m, n), a.shape())?;
        if count == 0 {
            return Err(OrimError::Empty("training set size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z_xi = DMatrix::from_fn(n, count, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z_delta = DMatrix::from_fn(m, count, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut xi = &self.m_xi * z_xi;
        for mut col in xi.column_iter_mut() {
            col += &self.mu_xi;
        }
        let mut b = a * &xi + &self.m_delta * z_delta * self.eta;
        for mut col in b.column_iter_mut() {
            col += &self.mu_delta;
        }
        TrainingSet::new(b, xi)
    }
}

fn check_condition(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let svd = ThinSvd::new(m)?;
    let smax = svd.s[0];
    let smin = svd.s[svd.len() - 1];
    if smin <= 0.0 || smax / smin > MAX_CONDITION {
        return Err(OrimError::Singular(format!(
            "{what} has condition number {:.3e} (limit {MAX_CONDITION:.0e})",
            if smin > 0.0 { smax / smin } else { f64::INFINITY }
        )));
    }
    Ok(())
}

/// Whitened forward operator `M_delta^-1 A`.
pub fn prewhiten_operator(a: &DMatrix<f64>, prior: &BayesPrior) -> Result<DMatrix<f64>> {
    check_dims("prewhiten operator", (prior.observation_dim(), a.ncols()), a.shape())?;
    check_condition(&prior.m_delta, "M_delta")?;
    prior
        .m_delta
        .solve_lower_triangular(a)
        .ok_or_else(|| OrimError::Singular("M_delta".into()))
}

/// Whitened observations `M_delta^-1 (b_k - mu_delta)` for every column.
pub fn prewhiten_observations(b: &DMatrix<f64>, prior: &BayesPrior) -> Result<DMatrix<f64>> {
    check_dims(
        "prewhiten observations",
        (prior.observation_dim(), b.ncols()),
        b.shape(),
    )?;
    check_condition(&prior.m_delta, "M_delta")?;
    let mut centered = b.clone();
    for mut col in centered.column_iter_mut() {
        col -= &prior.mu_delta;
    }
    prior
        .m_delta
        .solve_lower_triangular(&centered)
        .ok_or_else(|| OrimError::Singular("M_delta".into()))
}

/// `(M_delta^-1 A, M_delta^-1 (b - mu_delta))`.
pub fn prewhiten(a: &DMatrix<f64>, b: &DVector<f64>, prior: &BayesPrior) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let a_t = prewhiten_operator(a, prior)?;
    let b_mat = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let b_t = prewhiten_observations(&b_mat, prior)?;
    Ok((a_t, b_t.column(0).into_owned()))
}

fn require_whitened(prior: &BayesPrior, context: &str) -> Result<()> {
    if !prior.is_whitened() {
        return Err(OrimError::Hypothesis(format!(
            "{context} expects a whitened prior (zero noise mean, identity noise factor); call prewhiten first"
        )));
    }
    Ok(())
}

/// Unconstrained risk minimizer `S A^T (A S A^T + eta^2 I)^-1`,
/// `S = mu mu^T + M M^T`, for a whitened prior.
pub fn bayes_opt_unconstrained(a: &DMatrix<f64>, prior: &BayesPrior) -> Result<DMatrix<f64>> {
    require_whitened(prior, "bayes_opt_unconstrained")?;
    let (n, m) = (prior.signal_dim(), prior.observation_dim());
    check_dims("forward operator", (m, n), a.shape())?;
    let s = prior.second_moment();
    let eta = prior.eta();
    if eta == 0.0 {
        let rank_a = ThinSvd::new(a)?.numerical_rank(m, n);
        if rank_a < m {
            return Err(OrimError::Hypothesis(format!(
                "eta = 0 requires A to have full row rank {m}, but rank(A) = {rank_a}"
            )));
        }
        let rank_s = ThinSvd::new(&s)?.numerical_rank(n, n);
        if rank_s < n {
            return Err(OrimError::Hypothesis(
                "eta = 0 requires mu mu^T + M M^T to be nonsingular".into(),
            ));
        }
    }
    let a_s = a * &s; // m x n, equals (S A^T)^T
    let mut k = &a_s * a.transpose();
    for i in 0..m {
        k[(i, i)] += eta * eta;
    }
    // K symmetric: Z^T = K^-1 (A S)
    let zt = match k.clone().cholesky() {
        Some(ch) => ch.solve(&a_s),
        None => k
            .lu()
            .solve(&a_s)
            .ok_or_else(|| OrimError::Singular("A S A^T + eta^2 I".into()))?,
    };
    if zt.iter().any(|v| !v.is_finite()) {
        return Err(OrimError::Singular("A S A^T + eta^2 I".into()));
    }
    Ok(zt.transpose())
}

/// Bayes risk of `Z` under a whitened prior.
pub fn bayes_risk_eval(z: &DMatrix<f64>, a: &DMatrix<f64>, prior: &BayesPrior) -> Result<f64> {
    require_whitened(prior, "bayes_risk_eval")?;
    let (n, m) = (prior.signal_dim(), prior.observation_dim());
    check_dims("forward operator", (m, n), a.shape())?;
    check_dims("reconstruction matrix", (n, m), z.shape())?;
    let mut za = z * a;
    for i in 0..n {
        za[(i, i)] -= 1.0;
    }
    let mean_term = (&za * &prior.mu_xi).norm_squared();
    let cov_term = (&za * &prior.m_xi).norm_squared();
    Ok(mean_term + cov_term + prior.eta * prior.eta * z.norm_squared())
}

/// `|(ZA - I) M|_F^2 + alpha^2 |Z|_F^2` for a factored `Z`, without forming it.
pub fn low_rank_risk(z: &LowRankInverse, a: &DMatrix<f64>, m: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    check_dims("forward operator", (z.y().nrows(), z.x().nrows()), a.shape())?;
    check_dims("prior factor", (a.ncols(), a.ncols()), m.shape())?;
    let am = a * m;
    let mut resid = z.x() * (z.y().transpose() * am);
    resid -= m;
    let gram_x = z.x().transpose() * z.x();
    let gram_y = z.y().transpose() * z.y();
    let z_norm2 = gram_x.component_mul(&gram_y).sum();
    Ok(resid.norm_squared() + alpha * alpha * z_norm2)
}

/// Rank-constrained minimizer together with its uniqueness flag.
#[derive(Debug, Clone)]
pub struct BayesRankSolution {
    pub operator: LowRankInverse,
    pub unique: bool,
    /// Eigenvalues of `H`, nonincreasing.
    pub eigenvalues: Vec<f64>,
}

/// Generalized SVD pieces of the pair `(A, M^-1)` with shared right factor
/// `G^-1`: `A = U C G^-1`, `M^-1 = V S G^-1`.
struct PairDecomposition {
    /// `M V`; the shared factor is `G = M V S`.
    mv: DMatrix<f64>,
    /// `U C` (m x n); column i equals `c_i u_i`.
    uc: DMatrix<f64>,
    c: Vec<f64>,
    s: Vec<f64>,
}

/// Stacks `[A M; I] = [Q1; Q2] R`, so `R = Q2^-1` and `[A; M^-1] = [Q1; Q2] R M^-1`.
/// The SVD `Q2 = V S W^T` then gives `Q1 W = U C` and `G = M V S`.
fn pair_decomposition(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<PairDecomposition> {
    let (rows, n) = a.shape();
    let am = a * m;
    let mut stacked = DMatrix::zeros(rows + n, n);
    stacked.view_mut((0, 0), (rows, n)).copy_from(&am);
    stacked.view_mut((rows, 0), (n, n)).fill_with_identity();
    let q = nalgebra::QR::new(stacked).q();
    let q1 = q.view((0, 0), (rows, n)).into_owned();
    let q2 = q.view((rows, 0), (n, n)).into_owned();
    let svd = ThinSvd::new(&q2)?;
    let uc = q1 * &svd.v;
    let c: Vec<f64> = uc.column_iter().map(|col| col.norm()).collect();
    let s: Vec<f64> = svd.s.iter().copied().collect();
    Ok(PairDecomposition {
        mv: m * &svd.u,
        uc,
        c,
        s,
    })
}

/// `beta` when `M^T M = beta^2 I` to working precision.
fn isotropic_scale(m: &DMatrix<f64>) -> Option<f64> {
    let n = m.ncols();
    let gram = m.transpose() * m;
    let b2 = gram.trace() / n as f64;
    let tol = 16.0 * f64::EPSILON * n as f64 * b2;
    let iso = (b2 > 0.0)
        && gram.iter().enumerate().all(|(k, g)| {
            let target = if k % n == k / n { b2 } else { 0.0 };
            (g - target).abs() <= tol
        });
    iso.then(|| b2.sqrt())
}

/// Optimal rank-`r` reconstruction matrix for
/// `min |(ZA - I) M|_F^2 + alpha^2 |Z|_F^2` (zero prior mean).
pub fn bayes_opt_rank(a: &DMatrix<f64>, m: &DMatrix<f64>, alpha: f64, r: usize) -> Result<BayesRankSolution> {
    let (rows, n) = a.shape();
    check_dims("prior factor", (n, n), m.shape())?;
    if !alpha.is_finite() {
        return Err(OrimError::NonFinite("alpha"));
    }
    check_condition(m, "M")?;
    let rank_a = ThinSvd::new(a)?.numerical_rank(rows, n);
    if r == 0 || r > rank_a {
        return Err(OrimError::RankOutOfRange {
            context: "bayes_opt_rank",
            requested: r,
            max: rank_a,
        });
    }
    if alpha == 0.0 && rank_a < rows {
        return Err(OrimError::Hypothesis(format!(
            "alpha = 0 requires rank(A) = m = {rows}, but rank(A) = {rank_a}"
        )));
    }
    let pd = pair_decomposition(a, m)?;
    let a2 = alpha * alpha;
    let denom: Vec<f64> = pd.c.iter().zip(&pd.s).map(|(c, s)| c * c + a2 * s * s).collect();

    // Z* = G S^-2 C^T D^-1 U^T = M V S diag(1 / (c^2 + alpha^2 s^2)) (U C)^T
    let mut left = pd.mv.clone();
    let inv: Vec<f64> = denom
        .iter()
        .zip(&pd.s)
        .map(|(d, s)| if *d > 0.0 { s / d } else { 0.0 })
        .collect();
    scale_columns(&mut left, &inv);
    let z_star_t = &pd.uc * left.transpose(); // m x n

    // H = F F^T with F = M V diag(c / sqrt(c^2 + alpha^2 s^2))
    let mut f = pd.mv.clone();
    let w: Vec<f64> =
        pd.c.iter()
            .zip(&denom)
            .map(|(c, d)| if *d > 0.0 { c / d.sqrt() } else { 0.0 })
            .collect();
    let (x, eigenvalues): (DMatrix<f64>, Vec<f64>) = match isotropic_scale(m) {
        // M = beta Q with Q orthogonal: the eigenvectors of H are the columns
        // of M V, ordered by c / s. Going through the SVD of F instead loses
        // accuracy when alpha << sigma, since all weights then crowd near 1.
        Some(beta) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| (pd.c[j] / pd.s[j]).total_cmp(&(pd.c[i] / pd.s[i])));
            let x = DMatrix::from_fn(n, r, |i, j| pd.mv[(i, order[j])] / beta);
            let eigenvalues = order.iter().map(|&i| (beta * w[i]).powi(2)).collect();
            (x, eigenvalues)
        }
        None => {
            scale_columns(&mut f, &w);
            let fsvd = ThinSvd::new(&f)?;
            let eigenvalues = fsvd.s.iter().map(|s| s * s).collect();
            (fsvd.u.columns(0, r).into_owned(), eigenvalues)
        }
    };
    let unique = has_gap(&eigenvalues, r);
    let y = &z_star_t * &x;
    Ok(BayesRankSolution {
        operator: LowRankInverse::from_factors(x, y)?,
        unique,
        eigenvalues,
    })
}

/// Truncated Tikhonov operator `V_r diag(sigma / (sigma^2 + alpha^2)) U_r^T`.
/// `r = 0` gives the zero operator.
pub fn truncated_tikhonov(a: &DMatrix<f64>, alpha: f64, r: usize) -> Result<LowRankInverse> {
    let (rows, n) = a.shape();
    if r == 0 {
        return Ok(LowRankInverse::zeros(n, rows));
    }
    if !alpha.is_finite() {
        return Err(OrimError::NonFinite("alpha"));
    }
    let svd = ThinSvd::new(a)?;
    let op = truncated_pinv_factors(&svd, rows, n, r, "truncated_tikhonov")?;
    let filter: Vec<f64> = svd.s.iter().take(r).map(|s| s * s / (s * s + alpha * alpha)).collect();
    let (x, mut y) = (op.x().clone(), op.y().clone());
    scale_columns(&mut y, &filter);
    LowRankInverse::from_factors(x, y)
}

/// Relative difference `|a - b|_F / max(|b|_F, tiny)`.
pub fn relative_difference(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedform::{orim2, pinv_truncated};
    use crate::linalg::{max_abs, numerical_rank};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn random_lower(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let mut m = randn(rng, n, n);
        for i in 0..n {
            m[(i, i)] = 1.0 + m[(i, i)].abs();
            for j in i + 1..n {
                m[(i, j)] = 0.0;
            }
        }
        m
    }

    #[test]
    fn prewhiten_trivial_cases() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let id = BayesPrior::white(2, 2, 1.0, 0.1).unwrap();
        let (at, bt) = prewhiten(&a, &b, &id).unwrap();
        assert_eq!(at, a);
        assert_eq!(bt, b);
        let two = BayesPrior::new(
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2) * 2.0,
            1.0,
        )
        .unwrap();
        let (at, bt) = prewhiten(&a, &b, &two).unwrap();
        assert!(max_abs(&(at - &a / 2.0)) < 1e-15);
        assert!((bt - &b / 2.0).norm() < 1e-15);
    }

    #[test]
    fn prewhiten_rejects_ill_conditioned_factor() {
        let md = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-14]));
        let prior = BayesPrior::new(DVector::zeros(2), DMatrix::identity(2, 2), DVector::zeros(2), md, 1.0).unwrap();
        let err = prewhiten(&DMatrix::identity(2, 2), &DVector::zeros(2), &prior).unwrap_err();
        assert!(matches!(err, OrimError::Singular(_)));
    }

    #[test]
    fn prior_validation() {
        let upper = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(BayesPrior::new(
            DVector::zeros(2),
            upper,
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            1.0
        )
        .is_err());
        assert!(BayesPrior::white(2, 2, 0.0, 1.0).is_err());
        assert!(BayesPrior::white(2, 2, 1.0, -1.0).is_err());
        assert!((BayesPrior::white(2, 2, 2.0, 0.5).unwrap().alpha() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn prewhitened_noise_is_white() {
        let mut r = rng(3);
        let md = random_lower(&mut r, 3);
        let mu = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let prior = BayesPrior::new(DVector::zeros(3), DMatrix::identity(3, 3), mu.clone(), md.clone(), 1.0).unwrap();
        let draws = 100_000;
        let z = randn(&mut r, 3, draws);
        let mut delta = &md * z;
        for mut col in delta.column_iter_mut() {
            col += &mu;
        }
        let w = prewhiten_observations(&delta, &prior).unwrap();
        let cov = &w * w.transpose() / draws as f64;
        let mean = w.column_sum() / draws as f64;
        let tol = 3.0 / (draws as f64).sqrt();
        assert!(mean.amax() < tol);
        assert!(max_abs(&(cov - DMatrix::identity(3, 3))) < tol * 2.0_f64.sqrt());
    }

    #[test]
    fn unconstrained_trivial_cases() {
        let prior = BayesPrior::white(3, 3, 1.0, 0.0).unwrap();
        let z = bayes_opt_unconstrained(&DMatrix::identity(3, 3), &prior).unwrap();
        assert!(max_abs(&(z - DMatrix::identity(3, 3))) < 1e-14);
        let prior = BayesPrior::white(3, 3, 1.0, 1.0).unwrap();
        let z = bayes_opt_unconstrained(&DMatrix::identity(3, 3), &prior).unwrap();
        assert!(max_abs(&(z - DMatrix::identity(3, 3) * 0.5)) < 1e-14);
    }

    #[test]
    fn unconstrained_satisfies_normal_equation() {
        let mut r = rng(5);
        for _ in 0..10 {
            let a = randn(&mut r, 4, 3);
            let prior = BayesPrior::new(
                randn(&mut r, 3, 1).column(0).into_owned(),
                random_lower(&mut r, 3),
                DVector::zeros(4),
                DMatrix::identity(4, 4),
                0.3,
            )
            .unwrap();
            let z = bayes_opt_unconstrained(&a, &prior).unwrap();
            let s = prior.second_moment();
            let lhs = &z * (&a * &s * a.transpose() + DMatrix::identity(4, 4) * 0.09);
            let rhs = &s * a.transpose();
            assert!(relative_difference(&lhs, &rhs) < 1e-10);
        }
    }

    #[test]
    fn unconstrained_hypotheses_are_named() {
        let prior = BayesPrior::white(2, 3, 1.0, 0.0).unwrap();
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let err = bayes_opt_unconstrained(&a, &prior).unwrap_err();
        assert!(err.to_string().contains("full row rank"));
        let unwhite = BayesPrior::new(
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::identity(2, 2),
            1.0,
        )
        .unwrap();
        assert!(matches!(
            bayes_opt_unconstrained(&DMatrix::identity(2, 2), &unwhite),
            Err(OrimError::Hypothesis(_))
        ));
    }

    #[test]
    fn risk_trivial_cases() {
        let mut r = rng(6);
        let a = randn(&mut r, 3, 3);
        let prior = BayesPrior::new(
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            random_lower(&mut r, 3),
            DVector::zeros(3),
            DMatrix::identity(3, 3),
            0.0,
        )
        .unwrap();
        let inv = a.clone().try_inverse().unwrap();
        assert!(bayes_risk_eval(&inv, &a, &prior).unwrap() < 1e-20);
        let zero = DMatrix::zeros(3, 3);
        let expected = prior.mu_xi().norm_squared() + prior.m_xi().norm_squared();
        assert!((bayes_risk_eval(&zero, &a, &prior).unwrap() - expected).abs() < 1e-12);
        assert!(bayes_risk_eval(&DMatrix::zeros(2, 3), &a, &prior).is_err());
    }

    #[test]
    fn risk_matches_monte_carlo() {
        let mut r = rng(7);
        let a = randn(&mut r, 4, 3);
        let z = randn(&mut r, 3, 4) * 0.5;
        let prior = BayesPrior::new(
            DVector::from_vec(vec![0.5, -1.0, 0.2]),
            random_lower(&mut r, 3),
            DVector::zeros(4),
            DMatrix::identity(4, 4),
            0.4,
        )
        .unwrap();
        let data = prior.sample_training_set(&a, 100_000, 99).unwrap();
        let resid = &z * data.observations() - data.truths();
        let mc = resid.norm_squared() / data.len() as f64;
        let exact = bayes_risk_eval(&z, &a, &prior).unwrap();
        assert!((mc - exact).abs() / exact < 0.01, "{mc} vs {exact}");
    }

    #[test]
    fn white_prior_reduces_to_truncated_tikhonov() {
        let mut r = rng(8);
        for (m, n) in [(5, 5), (7, 5)] {
            let a = randn(&mut r, m, n);
            for rank in 1..=n {
                let sol = bayes_opt_rank(&a, &DMatrix::identity(n, n), 0.5, rank).unwrap();
                assert!(sol.unique);
                let tt = truncated_tikhonov(&a, 0.5, rank).unwrap();
                assert!((sol.operator.to_dense() - tt.to_dense()).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn general_prior_matches_stacked_closed_form() {
        // |(ZA - I)M|^2 + alpha^2 |Z|^2 = |Z [AM, alpha I] - [M, 0]|^2
        let mut r = rng(9);
        let (m, n, alpha) = (6, 5, 0.3);
        let a = randn(&mut r, m, n);
        let mf = random_lower(&mut r, n);
        let mut q = DMatrix::zeros(m, n + m);
        q.view_mut((0, 0), (m, n)).copy_from(&(&a * &mf));
        q.view_mut((0, n), (m, m)).copy_from(&(DMatrix::identity(m, m) * alpha));
        let mut t = DMatrix::zeros(n, n + m);
        t.view_mut((0, 0), (n, n)).copy_from(&mf);
        let data = TrainingSet::new(q, t).unwrap();
        for rank in 1..=n {
            let ours = bayes_opt_rank(&a, &mf, alpha, rank).unwrap();
            let oracle = orim2(&data, rank).unwrap();
            assert!(ours.unique && oracle.unique);
            let diff = relative_difference(&ours.operator.to_dense(), &oracle.operator.to_dense());
            assert!(diff < 1e-8, "rank {rank}: {diff}");
            let risk = low_rank_risk(&ours.operator, &a, &mf, alpha).unwrap();
            let direct = (ours.operator.to_dense() * &a * &mf - &mf).norm_squared()
                + alpha * alpha * ours.operator.to_dense().norm_squared();
            assert!((risk - direct).abs() < 1e-10 * direct.max(1.0));
        }
    }

    #[test]
    fn full_rank_equals_unconstrained() {
        let mut r = rng(10);
        let (n, alpha) = (4, 0.7);
        let a = randn(&mut r, n, n);
        let mf = random_lower(&mut r, n);
        let sol = bayes_opt_rank(&a, &mf, alpha, n).unwrap();
        let prior = BayesPrior::new(DVector::zeros(n), mf, DVector::zeros(n), DMatrix::identity(n, n), alpha).unwrap();
        let unc = bayes_opt_unconstrained(&a, &prior).unwrap();
        assert!(relative_difference(&sol.operator.to_dense(), &unc) < 1e-9);
    }

    #[test]
    fn beats_random_rank_two_competitors() {
        let mut r = rng(11);
        let a = randn(&mut r, 5, 5);
        let id = DMatrix::identity(5, 5);
        let prior = BayesPrior::white(5, 5, 1.0, 0.5).unwrap();
        let sol = bayes_opt_rank(&a, &id, 0.5, 2).unwrap();
        let best = bayes_risk_eval(&sol.operator.to_dense(), &a, &prior).unwrap();
        for _ in 0..200 {
            let q = randn(&mut r, 5, 2) * randn(&mut r, 2, 5) * 0.3;
            assert!(best <= bayes_risk_eval(&q, &a, &prior).unwrap());
        }
    }

    #[test]
    fn large_alpha_shrinks_operator() {
        let mut r = rng(12);
        let a = randn(&mut r, 4, 4);
        let id = DMatrix::identity(4, 4);
        let norms: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&al| bayes_opt_rank(&a, &id, al, 3).unwrap().operator.to_dense().norm())
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2]);
        assert!(norms[2] < 0.05);
    }

    #[test]
    fn rank_update_structure() {
        let mut r = rng(13);
        let (n, alpha) = (6, 0.2);
        let a = randn(&mut r, n, n);
        let id = DMatrix::identity(n, n);
        let (j, l) = (2, 2);
        let zj = bayes_opt_rank(&a, &id, alpha, j).unwrap();
        let zjl = bayes_opt_rank(&a, &id, alpha, j + l).unwrap();
        let update = zjl.operator.to_dense() - zj.operator.to_dense();
        let sv = ThinSvd::new(&update).unwrap();
        assert_eq!(numerical_rank(sv.s.as_slice(), n, n), l);
        // rebuilding from the nested factors
        let lead = zjl.operator.leading(j).to_dense();
        assert!(max_abs(&(lead - zj.operator.to_dense())) < 1e-10);
        // the update minimizes the rank-l subproblem
        let objective = |upd: &DMatrix<f64>| {
            let z = zj.operator.to_dense() + upd;
            (&z * &a - &id).norm_squared() + alpha * alpha * z.norm_squared()
        };
        let best = objective(&update);
        for _ in 0..200 {
            let q = randn(&mut r, n, l) * randn(&mut r, l, n) * 0.2;
            assert!(best <= objective(&q) + 1e-12);
        }
    }

    #[test]
    fn rank_and_hypothesis_errors() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let id = DMatrix::identity(2, 2);
        assert!(matches!(
            bayes_opt_rank(&a, &id, 0.1, 3),
            Err(OrimError::RankOutOfRange { .. })
        ));
        assert!(matches!(
            bayes_opt_rank(&a, &id, 0.1, 0),
            Err(OrimError::RankOutOfRange { .. })
        ));
        assert!(matches!(bayes_opt_rank(&a, &id, 0.0, 1), Err(OrimError::Hypothesis(_))));
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(bayes_opt_rank(&a, &sing, 0.1, 1), Err(OrimError::Singular(_))));
    }

    #[test]
    fn truncated_tikhonov_cases() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let op = truncated_tikhonov(&a, 1.0, 2).unwrap().to_dense();
        assert!(max_abs(&(op - DMatrix::from_diagonal(&DVector::from_vec(vec![0.4, 0.5])))) < 1e-15);
        let zero = truncated_tikhonov(&a, 1.0, 0).unwrap();
        assert_eq!(zero.rank(), 0);
        assert_eq!(zero.to_dense(), DMatrix::zeros(2, 2));
        let mut r = rng(14);
        let a = randn(&mut r, 6, 4);
        let tsvd = pinv_truncated(&a, 3).unwrap();
        assert!(max_abs(&(truncated_tikhonov(&a, 0.0, 3).unwrap().to_dense() - tsvd)) < 1e-12);
        assert!(truncated_tikhonov(&a, 0.1, 5).is_err());
    }

    #[test]
    fn filter_factor_expansion() {
        let mut r = rng(15);
        let a = randn(&mut r, 5, 5);
        let b = randn(&mut r, 5, 1);
        let alpha = 0.3;
        let op = truncated_tikhonov(&a, alpha, 3).unwrap();
        let got = op.to_dense() * &b;
        let svd = ThinSvd::new(&a).unwrap();
        let mut expected = DMatrix::zeros(5, 1);
        for j in 0..3 {
            let s = svd.s[j];
            let phi = s * s / (s * s + alpha * alpha);
            let coeff = phi * svd.u.column(j).dot(&b.column(0)) / s;
            expected += svd.v.column(j) * coeff;
        }
        assert!(max_abs(&(got - expected)) < 1e-12);
    }

    #[test]
    fn empirical_risk_approaches_bayes_risk() {
        let mut r = rng(16);
        let n = 10;
        let a = randn(&mut r, n, n) / (n as f64).sqrt();
        let prior = BayesPrior::white(n, n, 1.0, 0.3).unwrap();
        let rank = 2;
        let bayes = bayes_opt_rank(&a, &DMatrix::identity(n, n), prior.alpha(), rank).unwrap();
        let bayes_risk = bayes_risk_eval(&bayes.operator.to_dense(), &a, &prior).unwrap();
        let data = prior.sample_training_set(&a, 50 * n, 2024).unwrap();
        let emp = orim2(&data, rank).unwrap().operator.to_dense();
        let f_k = (&emp * data.observations() - data.truths()).norm_squared() / data.len() as f64;
        assert!((f_k - bayes_risk).abs() / bayes_risk < 0.05, "{f_k} vs {bayes_risk}");
    }

    #[test]
    fn isotropic_prior_matches_general_route() {
        let mut g = rng(31);
        let a = randn(&mut g, 7, 5);
        let q = nalgebra::QR::new(randn(&mut g, 5, 5)).q();
        let m = &q * 1.7;
        assert!(isotropic_scale(&m).is_some());
        // a tiny lower-triangular nudge forces the general SVD path
        let mut nudged = m.clone();
        nudged[(4, 0)] += 1e-9;
        assert!(isotropic_scale(&nudged).is_none());
        for r in 1..=5 {
            let fast = bayes_opt_rank(&a, &m, 0.8, r).unwrap();
            let slow = bayes_opt_rank(&a, &nudged, 0.8, r).unwrap();
            let gap = max_abs(&(fast.operator.to_dense() - slow.operator.to_dense()));
            assert!(gap < 1e-7, "rank {r}: {gap}");
            for (x, y) in fast.eigenvalues.iter().zip(&slow.eigenvalues) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }
}
