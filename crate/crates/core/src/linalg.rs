//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{OrimError, Result};

/// Relative cutoff used for numerical rank decisions: singular values at or
/// below `max(rows, cols) * sigma_1 * RANK_RTOL` count as zero.
pub const RANK_RTOL: f64 = 1e-12;

/// Thin SVD with singular values in nonincreasing order and `v` stored
/// un-transposed (`m = u * diag(s) * v^T`).
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(OrimError::Empty("svd of an empty matrix"));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(OrimError::NonFinite("svd input"));
        }
        let svd = nalgebra::SVD::try_new(m.clone(), true, true, f64::EPSILON, 0)
            .ok_or_else(|| OrimError::Solver("svd did not converge".into()))?;
        let u = svd.u.expect("requested u");
        let v = svd.v_t.expect("requested v_t").transpose();
        Ok(ThinSvd {
            u,
            s: svd.singular_values,
            v,
        })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Number of singular values above the relative cutoff for a matrix of
    /// the given shape.
    pub fn numerical_rank(&self, rows: usize, cols: usize) -> usize {
        numerical_rank(self.s.as_slice(), rows, cols)
    }
}

pub fn numerical_rank(sorted_singular_values: &[f64], rows: usize, cols: usize) -> usize {
    let Some(&s1) = sorted_singular_values.first() else {
        return 0;
    };
    if s1 <= 0.0 {
        return 0;
    }
    let tol = rows.max(cols) as f64 * s1 * RANK_RTOL;
    sorted_singular_values.iter().take_while(|&&s| s > tol).count()
}

/// True when `s[r-1]` is separated from `s[r]` beyond round-off, or when
/// there is no `s[r]`.
pub fn has_gap(sorted_singular_values: &[f64], r: usize) -> bool {
    if r == 0 || r >= sorted_singular_values.len() {
        return true;
    }
    let s1 = sorted_singular_values[0];
    let tol = (sorted_singular_values.len() as f64) * s1 * RANK_RTOL;
    sorted_singular_values[r - 1] - sorted_singular_values[r] > tol
}

/// Moore-Penrose pseudo-inverse with the numerical-rank cutoff.
pub fn pinv(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = ThinSvd::new(m)?;
    let k = svd.numerical_rank(m.nrows(), m.ncols());
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for j in 0..k {
        let vj = svd.v.column(j);
        let uj = svd.u.column(j);
        out.ger(1.0 / svd.s[j], &vj, &uj, 1.0);
    }
    Ok(out)
}

/// Orthonormal basis for the column space of a full-column-rank matrix.
pub fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    nalgebra::QR::new(m.clone()).q()
}

/// Completes the orthonormal columns of `q` (k columns in R^d) to a full
/// orthonormal basis of R^d; the first k columns are kept unchanged.
pub fn complete_basis(q: &DMatrix<f64>) -> DMatrix<f64> {
    let d = q.nrows();
    let mut basis: Vec<DVector<f64>> = q.column_iter().map(|c| c.into_owned()).collect();
    let mut e = 0;
    while basis.len() < d && e < d {
        let mut cand = DVector::zeros(d);
        cand[e] = 1.0;
        // two passes of Gram-Schmidt
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&cand);
                cand.axpy(-proj, b, 1.0);
            }
        }
        let norm = cand.norm();
        if norm > 1e-8 {
            basis.push(cand / norm);
        }
        e += 1;
    }
    DMatrix::from_columns(&basis)
}

/// Scales column `j` of `m` by `w[j]`.
pub fn scale_columns(m: &mut DMatrix<f64>, w: &[f64]) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col *= w[j];
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_is_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0]);
        let svd = ThinSvd::new(&m).unwrap();
        assert!(svd.s[0] >= svd.s[1]);
        let mut us = svd.u.clone();
        scale_columns(&mut us, svd.s.as_slice());
        let back = us * svd.v.transpose();
        assert!(max_abs(&(back - m)) < 1e-12);
    }

    #[test]
    fn pinv_of_rank_deficient() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pinv(&m).unwrap();
        assert!(max_abs(&(p.map(|x| x - 0.25))) < 1e-14);
    }

    #[test]
    fn completed_basis_is_orthonormal() {
        let q = orthonormal_columns(&DMatrix::from_row_slice(4, 2, &[1., 0., 1., 1., 0., 1., 2., 0.]));
        let full = complete_basis(&q);
        assert_eq!(full.ncols(), 4);
        let gram = full.transpose() * &full;
        assert!(max_abs(&(gram - DMatrix::identity(4, 4))) < 1e-12);
        assert!(max_abs(&(full.columns(0, 2) - &q)) < 1e-15);
    }

    #[test]
    fn gap_detection() {
        assert!(!has_gap(&[1.0, 1.0], 1));
        assert!(has_gap(&[2.0, 1.0], 1));
        assert!(has_gap(&[2.0, 1.0], 2));
    }
}
