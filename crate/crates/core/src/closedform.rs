//! Exact optimal low-rank inverse for the squared 2-norm.
//!
//! For `rho = (1/2)|.|^2` the training objective is `(1/2K)|Z B - C|_F^2`.
//! With `B = U S V^T` of numerical rank `s`, let `P = C V_s V_s^T`; then
//! `Z = P_r B^+` is a minimizer over rank-`r` matrices, unique iff
//! `r >= rank(P)` or the `r`-th and `(r+1)`-th singular values of `P` differ.
//!
//! `P` is never formed. `W = C V_s` has the same nonzero singular values as
//! `P` (the columns of `V_s` are orthonormal), and if `W = U_w S_w V_w^T`
//! then `P_r B^+ = U_w,r S_w,r V_w,r^T S_s^-1 U_s^T`, which is stored as
//! `X = U_w,r` and `Y = U_s S_s^-1 V_w,r S_w,r`.

use nalgebra::{DMatrix, DVector};

use crate::error::{OrimError, Result};
use crate::linalg::{has_gap, numerical_rank, scale_columns, ThinSvd};
use crate::model::{LowRankInverse, TrainingSet};

/// Leading `r` singular triplets of a matrix.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
    /// `sigma_r > sigma_{r+1}`, or `r` is the full rank.
    pub gap: bool,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U_r S_r V_r^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        scale_columns(&mut us, self.s.as_slice());
        us * self.v.transpose()
    }
}

pub fn truncated_svd(m: &DMatrix<f64>, r: usize) -> Result<TruncatedSvd> {
    let max = m.nrows().min(m.ncols());
    if r == 0 || r > max {
        return Err(OrimError::RankOutOfRange {
            context: "truncated_svd",
            requested: r,
            max,
        });
    }
    let svd = ThinSvd::new(m)?;
    let full_rank = svd.numerical_rank(m.nrows(), m.ncols());
    let gap = r >= full_rank || has_gap(svd.s.as_slice(), r);
    Ok(TruncatedSvd {
        u: svd.u.columns(0, r).into_owned(),
        s: svd.s.rows(0, r).into_owned(),
        v: svd.v.columns(0, r).into_owned(),
        gap,
    })
}

/// `(M_r)^+ = V_r S_r^-1 U_r^T` as a factored operator (`X = V_r`,
/// `Y = U_r S_r^-1`), from a precomputed SVD.
pub(crate) fn truncated_pinv_factors(
    svd: &ThinSvd,
    rows: usize,
    cols: usize,
    r: usize,
    context: &'static str,
) -> Result<LowRankInverse> {
    let rank = svd.numerical_rank(rows, cols);
    if r > rank {
        return Err(OrimError::RankOutOfRange {
            context,
            requested: r,
            max: rank,
        });
    }
    let x = svd.v.columns(0, r).into_owned();
    let mut y = svd.u.columns(0, r).into_owned();
    let inv: Vec<f64> = svd.s.iter().take(r).map(|s| 1.0 / s).collect();
    scale_columns(&mut y, &inv);
    LowRankInverse::from_factors(x, y)
}

/// Dense `(M_r)^+` for `1 <= r <= rank(M)`.
pub fn pinv_truncated(m: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    if r == 0 {
        return Err(OrimError::RankOutOfRange {
            context: "pinv_truncated",
            requested: 0,
            max: m.nrows().min(m.ncols()),
        });
    }
    let svd = ThinSvd::new(m)?;
    Ok(truncated_pinv_factors(&svd, m.nrows(), m.ncols(), r, "pinv_truncated")?.to_dense())
}

/// Rank-`r` minimizer together with its uniqueness flag.
#[derive(Debug, Clone)]
pub struct Orim2Solution {
    pub operator: LowRankInverse,
    pub unique: bool,
}

/// Precomputed factorizations for evaluating the closed-form minimizer at
/// any rank without repeating the SVDs.
#[derive(Debug, Clone)]
pub struct Orim2Solver {
    /// `U_s S_s^-1` (m x s).
    left: DMatrix<f64>,
    w_svd: ThinSvd,
    rank_b: usize,
    rank_p: usize,
}

impl Orim2Solver {
    pub fn new(data: &TrainingSet) -> Result<Self> {
        let b = data.observations();
        let c = data.truths();
        let b_svd = ThinSvd::new(b)?;
        let s = b_svd.numerical_rank(b.nrows(), b.ncols());
        if s == 0 {
            return Err(OrimError::Singular("observation matrix is numerically zero".into()));
        }
        let v_s = b_svd.v.columns(0, s);
        let w = c * v_s;
        let w_svd = ThinSvd::new(&w)?;
        // P = W V_s^T lives in R^{n x K}
        let rank_p = numerical_rank(w_svd.s.as_slice(), c.nrows(), c.ncols());
        let mut left = b_svd.u.columns(0, s).into_owned();
        let inv: Vec<f64> = b_svd.s.iter().take(s).map(|v| 1.0 / v).collect();
        scale_columns(&mut left, &inv);
        Ok(Orim2Solver {
            left,
            w_svd,
            rank_b: s,
            rank_p,
        })
    }

    /// Numerical rank of the observation matrix.
    pub fn rank_observations(&self) -> usize {
        self.rank_b
    }

    /// Numerical rank of `P`; the largest useful operator rank.
    pub fn max_rank(&self) -> usize {
        self.rank_p
    }

    /// Singular values of `P`, nonincreasing.
    pub fn target_singular_values(&self) -> &[f64] {
        self.w_svd.s.as_slice()
    }

    pub fn at_rank(&self, r: usize) -> Result<Orim2Solution> {
        if r == 0 {
            return Err(OrimError::RankOutOfRange {
                context: "orim2",
                requested: 0,
                max: self.rank_p,
            });
        }
        let r_eff = r.min(self.rank_p);
        let unique = r >= self.rank_p || has_gap(self.w_svd.s.as_slice(), r);
        let x = self.w_svd.u.columns(0, r_eff).into_owned();
        let mut vw = self.w_svd.v.columns(0, r_eff).into_owned();
        scale_columns(&mut vw, &self.w_svd.s.as_slice()[..r_eff]);
        let y = &self.left * vw;
        Ok(Orim2Solution {
            operator: LowRankInverse::from_factors(x, y)?,
            unique,
        })
    }
}

/// Closed-form optimal rank-`r` regularized inverse for the squared 2-norm.
pub fn orim2(data: &TrainingSet, r: usize) -> Result<Orim2Solution> {
    if r == 0 {
        return Err(OrimError::RankOutOfRange {
            context: "orim2",
            requested: 0,
            max: data.truth_dim().min(data.observation_dim()),
        });
    }
    Orim2Solver::new(data)?.at_rank(r)
}
