//! Error measures, training data and the factored reconstruction operator.
//!
//! Every solver in the crate minimizes the sample mean error
//! `f_K(Z) = (1/K) sum_k rho(Z b_k - xi_k)` for a separable error measure
//! `rho(x) = sum_i phi(x_i)`. Measures follow the `(1/p) |x|_p^p`
//! normalization, so `PNorm(2)` is half the squared Euclidean norm.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{check_dims, OrimError, Result};

/// Default smoothing offset for `SmoothedPNorm`.
pub const DEFAULT_SMOOTHING: f64 = 1e-4;
/// Default Huber threshold.
pub const DEFAULT_HUBER_THRESHOLD: f64 = 1.0;

/// Separable error measure `rho(x) = sum_i phi(x_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorMeasure {
    /// `phi(t) = |t|^p / p`, `p >= 1`.
    PNorm { p: f64 },
    /// `phi(t) = ((t^2 + eps^2)^(p/2) - eps^p) / p`, `1 < p < 2`.
    SmoothedPNorm { p: f64, epsilon: f64 },
    /// Quadratic for `|t| <= threshold`, linear beyond.
    Huber { threshold: f64 },
}

impl ErrorMeasure {
    pub fn pnorm(p: f64) -> Result<Self> {
        let m = ErrorMeasure::PNorm { p };
        m.validate()?;
        Ok(m)
    }

    pub fn smoothed_pnorm(p: f64, epsilon: f64) -> Result<Self> {
        let m = ErrorMeasure::SmoothedPNorm { p, epsilon };
        m.validate()?;
        Ok(m)
    }

    pub fn huber(threshold: f64) -> Result<Self> {
        let m = ErrorMeasure::Huber { threshold };
        m.validate()?;
        Ok(m)
    }

    /// Half squared Euclidean norm.
    pub fn squared() -> Self {
        ErrorMeasure::PNorm { p: 2.0 }
    }

    /// The measure the solvers should optimize for a nominal `p`: plain
    /// p-norms for `p >= 2`, the smoothed surrogate below.
    pub fn trainable(p: f64) -> Result<Self> {
        if p < 2.0 {
            Self::smoothed_pnorm(p, DEFAULT_SMOOTHING)
        } else {
            Self::pnorm(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ErrorMeasure::PNorm { p } => {
                if !(p.is_finite() && p >= 1.0) {
                    return Err(OrimError::InvalidParameter(format!(
                        "p-norm exponent must be finite and >= 1, got {p}"
                    )));
                }
            }
            ErrorMeasure::SmoothedPNorm { p, epsilon } => {
                if !(p > 1.0 && p < 2.0) {
                    return Err(OrimError::InvalidParameter(format!(
                        "smoothed p-norm requires 1 < p < 2, got {p}"
                    )));
                }
                if !(epsilon.is_finite() && epsilon > 0.0) {
                    return Err(OrimError::InvalidParameter(format!(
                        "smoothing offset must be positive, got {epsilon}"
                    )));
                }
            }
            ErrorMeasure::Huber { threshold } => {
                if !(threshold.is_finite() && threshold > 0.0) {
                    return Err(OrimError::InvalidParameter(format!(
                        "Huber threshold must be positive, got {threshold}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// True when `rho` is twice differentiable everywhere.
    pub fn is_smooth(&self) -> bool {
        match *self {
            ErrorMeasure::PNorm { p } => p >= 2.0,
            ErrorMeasure::SmoothedPNorm { .. } => true,
            // second derivative jumps at the threshold but the first is continuous
            ErrorMeasure::Huber { .. } => true,
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(*self, ErrorMeasure::PNorm { p } if p == 2.0)
    }

    #[inline]
    pub fn phi(&self, t: f64) -> f64 {
        match *self {
            ErrorMeasure::PNorm { p } => {
                if p == 2.0 {
                    0.5 * t * t
                } else {
                    abs_pow(t, p) / p
                }
            }
            ErrorMeasure::SmoothedPNorm { p, epsilon } => {
                ((t * t + epsilon * epsilon).powf(0.5 * p) - epsilon.powf(p)) / p
            }
            ErrorMeasure::Huber { threshold } => {
                let a = t.abs();
                if a <= threshold {
                    0.5 * t * t
                } else {
                    threshold * (a - 0.5 * threshold)
                }
            }
        }
    }

    /// First derivative of `phi`; `None` where it does not exist.
    #[inline]
    pub fn dphi(&self, t: f64) -> Option<f64> {
        match *self {
            ErrorMeasure::PNorm { p } => {
                if p == 2.0 {
                    Some(t)
                } else if t == 0.0 && p < 2.0 {
                    None
                } else {
                    Some(t.signum() * abs_pow(t, p - 1.0))
                }
            }
            ErrorMeasure::SmoothedPNorm { p, epsilon } => Some(t * (t * t + epsilon * epsilon).powf(0.5 * p - 1.0)),
            ErrorMeasure::Huber { threshold } => Some(t.clamp(-threshold, threshold)),
        }
    }

    /// Second derivative of `phi`; `None` where it does not exist.
    #[inline]
    pub fn d2phi(&self, t: f64) -> Option<f64> {
        match *self {
            ErrorMeasure::PNorm { p } => {
                if p == 2.0 {
                    Some(1.0)
                } else if t == 0.0 {
                    if p > 2.0 {
                        Some(0.0)
                    } else {
                        None
                    }
                } else {
                    Some((p - 1.0) * abs_pow(t, p - 2.0))
                }
            }
            ErrorMeasure::SmoothedPNorm { p, epsilon } => {
                let s = t * t + epsilon * epsilon;
                Some(s.powf(0.5 * p - 2.0) * ((p - 1.0) * t * t + epsilon * epsilon))
            }
            ErrorMeasure::Huber { threshold } => Some(if t.abs() <= threshold { 1.0 } else { 0.0 }),
        }
    }

    fn kink_error(&self) -> OrimError {
        OrimError::Undefined(format!(
            "{self:?} is not differentiable at a zero component; \
             use ErrorMeasure::SmoothedPNorm for 1 < p < 2"
        ))
    }

    /// `rho(x) = sum_i phi(x_i)`.
    pub fn rho_eval(&self, x: &[f64]) -> Result<f64> {
        self.validate()?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(OrimError::NonFinite("rho_eval input"));
        }
        Ok(x.iter().map(|&t| self.phi(t)).sum())
    }

    /// Component-wise gradient of `rho`.
    pub fn rho_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(OrimError::NonFinite("rho_grad input"));
        }
        x.iter()
            .map(|&t| self.dphi(t).ok_or_else(|| self.kink_error()))
            .collect()
    }

    /// Diagonal of the Hessian of `rho`.
    pub fn rho_hess_diag(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(OrimError::NonFinite("rho_hess_diag input"));
        }
        x.iter()
            .map(|&t| self.d2phi(t).ok_or_else(|| self.kink_error()))
            .collect()
    }

    /// `rho` of every column of `e`.
    pub fn column_values(&self, e: &DMatrix<f64>, summation: Summation) -> Result<Vec<f64>> {
        if e.iter().any(|v| !v.is_finite()) {
            return Err(OrimError::NonFinite("residual matrix"));
        }
        let col = |k: usize| e.column(k).iter().map(|&t| self.phi(t)).sum::<f64>();
        Ok(match summation {
            Summation::Ordered => (0..e.ncols()).map(col).collect(),
            Summation::Parallel => (0..e.ncols()).into_par_iter().map(col).collect(),
        })
    }

    /// `column_values` and `grad_matrix` in one pass; the smoothed measure
    /// shares a single power evaluation between `phi` and `phi'`.
    pub fn values_and_grad(&self, e: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        if e.iter().any(|v| !v.is_finite()) {
            return Err(OrimError::NonFinite("residual matrix"));
        }
        let mut grad = e.clone();
        let mut values = vec![0.0; e.ncols()];
        let rows = e.nrows();
        if rows == 0 {
            return Ok((values, grad));
        }
        let fill = |(col, out): (&mut [f64], &mut f64)| -> Result<()> {
            let mut acc = 0.0;
            for v in col {
                let t = *v;
                let (phi, dphi) = match *self {
                    ErrorMeasure::SmoothedPNorm { p, epsilon } => {
                        let sq = t * t + epsilon * epsilon;
                        let q = sq.powf(0.5 * p - 1.0);
                        ((sq * q - epsilon.powf(p)) / p, t * q)
                    }
                    _ => (self.phi(t), self.dphi(t).ok_or_else(|| self.kink_error())?),
                };
                acc += phi;
                *v = dphi;
            }
            *out = acc;
            Ok(())
        };
        let mut pairs = grad.as_mut_slice().chunks_mut(rows).zip(values.iter_mut());
        if e.len() < PAR_MIN_LEN {
            pairs.try_for_each(fill)?;
        } else {
            pairs.par_bridge().try_for_each(fill)?;
        }
        Ok((values, grad))
    }

    fn elementwise(&self, e: &DMatrix<f64>, f: impl Fn(f64) -> Option<f64> + Sync) -> Result<DMatrix<f64>> {
        let mut out = e.clone();
        let rows = e.nrows().max(1);
        let apply = |chunk: &mut [f64]| -> Result<()> {
            for v in chunk {
                *v = f(*v).ok_or_else(|| self.kink_error())?;
            }
            Ok(())
        };
        if e.len() < PAR_MIN_LEN {
            apply(out.as_mut_slice())?;
        } else {
            out.as_mut_slice().par_chunks_mut(rows * 16).try_for_each(apply)?;
        }
        Ok(out)
    }

    /// Element-wise `phi'` of a residual matrix.
    pub fn grad_matrix(&self, e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.elementwise(e, |t| self.dphi(t))
    }

    /// Element-wise `phi''` of a residual matrix.
    pub fn hess_matrix(&self, e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.elementwise(e, |t| self.d2phi(t))
    }
}

impl std::fmt::Display for ErrorMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            ErrorMeasure::PNorm { p } => write!(f, "pnorm(p={p})"),
            ErrorMeasure::SmoothedPNorm { p, epsilon } => {
                write!(f, "smoothed_pnorm(p={p},eps={epsilon})")
            }
            ErrorMeasure::Huber { threshold } => write!(f, "huber(threshold={threshold})"),
        }
    }
}

/// `|t|^q`, using repeated multiplication for small integer exponents.
#[inline]
fn abs_pow(t: f64, q: f64) -> f64 {
    let a = t.abs();
    if q.fract() == 0.0 && (0.0..=16.0).contains(&q) {
        a.powi(q as i32)
    } else {
        a.powf(q)
    }
}

/// Element count below which element-wise work stays on the calling thread.
const PAR_MIN_LEN: usize = 1 << 14;

/// How reductions over samples are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Summation {
    /// Sequential, fixed-order sums; results are bit-reproducible.
    #[default]
    Ordered,
    /// Per-sample work and the final sum run on the rayon pool.
    Parallel,
}

impl Summation {
    pub fn sum(self, values: &[f64]) -> f64 {
        match self {
            Summation::Ordered => values.iter().sum(),
            Summation::Parallel => values.par_iter().sum(),
        }
    }
}

/// Paired observations `B` (m x K) and ground truths `C` (n x K), one sample
/// per column.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    observations: DMatrix<f64>,
    truths: DMatrix<f64>,
}

impl TrainingSet {
    pub fn new(observations: DMatrix<f64>, truths: DMatrix<f64>) -> Result<Self> {
        if observations.ncols() == 0 {
            return Err(OrimError::Empty("training set has no samples"));
        }
        if observations.nrows() == 0 || truths.nrows() == 0 {
            return Err(OrimError::Empty("training samples have zero length"));
        }
        if observations.ncols() != truths.ncols() {
            return Err(OrimError::DimensionMismatch {
                context: "training set sample count",
                expected: format!("{} columns", observations.ncols()),
                got: format!("{} columns", truths.ncols()),
            });
        }
        if observations.iter().chain(truths.iter()).any(|v| !v.is_finite()) {
            return Err(OrimError::NonFinite("training set"));
        }
        Ok(TrainingSet { observations, truths })
    }

    /// `B`, m x K.
    pub fn observations(&self) -> &DMatrix<f64> {
        &self.observations
    }

    /// `C`, n x K.
    pub fn truths(&self) -> &DMatrix<f64> {
        &self.truths
    }

    pub fn len(&self) -> usize {
        self.observations.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observation_dim(&self) -> usize {
        self.observations.nrows()
    }

    pub fn truth_dim(&self) -> usize {
        self.truths.nrows()
    }

    /// Roles of observations and truths exchanged, for learning a forward
    /// operator instead of an inverse.
    pub fn swapped(&self) -> TrainingSet {
        TrainingSet {
            observations: self.truths.clone(),
            truths: self.observations.clone(),
        }
    }

    /// The first `k` samples.
    pub fn head(&self, k: usize) -> Result<TrainingSet> {
        if k == 0 || k > self.len() {
            return Err(OrimError::InvalidParameter(format!(
                "cannot take {k} of {} samples",
                self.len()
            )));
        }
        Ok(TrainingSet {
            observations: self.observations.columns(0, k).into_owned(),
            truths: self.truths.columns(0, k).into_owned(),
        })
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.observations, self.truths)
    }
}

/// A linear map from observation space (dim m) to solution space (dim n).
pub trait LinearOperator {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Applies the operator to every column of `b`.
    fn apply(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

impl LinearOperator for DMatrix<f64> {
    fn input_dim(&self) -> usize {
        self.ncols()
    }

    fn output_dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.ncols() {
            return Err(OrimError::DimensionMismatch {
                context: "dense operator application",
                expected: format!("{} rows", self.ncols()),
                got: format!("{} rows", b.nrows()),
            });
        }
        Ok(self * b)
    }
}

/// Reconstruction operator stored as `Z = X Y^T` with `X: n x r`, `Y: m x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankInverse {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl LowRankInverse {
    /// The rank-0 operator from R^m to R^n.
    pub fn zeros(n: usize, m: usize) -> Self {
        LowRankInverse {
            x: DMatrix::zeros(n, 0),
            y: DMatrix::zeros(m, 0),
        }
    }

    pub fn from_factors(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.ncols() != y.ncols() {
            return Err(OrimError::DimensionMismatch {
                context: "low-rank factors",
                expected: format!("{} columns in Y", x.ncols()),
                got: format!("{} columns", y.ncols()),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(OrimError::NonFinite("low-rank factors"));
        }
        Ok(LowRankInverse { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Number of stored rank-one terms (an upper bound on the rank of `Z`).
    pub fn rank(&self) -> usize {
        self.x.ncols()
    }

    /// `X (Y^T b)` for a single vector.
    pub fn apply_vector(&self, b: &[f64]) -> Result<Vec<f64>> {
        let bm = DMatrix::from_column_slice(b.len(), 1, b);
        Ok(self.apply(&bm)?.as_slice().to_vec())
    }

    /// Assembles the dense `n x m` matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.x * self.y.transpose()
    }

    /// Appends the columns of another factor pair (`Z <- Z + X_l Y_l^T`).
    pub fn append(&mut self, x_l: &DMatrix<f64>, y_l: &DMatrix<f64>) -> Result<()> {
        check_dims("appended X factor", (self.x.nrows(), x_l.ncols()), x_l.shape())?;
        check_dims("appended Y factor", (self.y.nrows(), x_l.ncols()), y_l.shape())?;
        let r = self.rank();
        let l = x_l.ncols();
        let mut x = self.x.clone().resize_horizontally(r + l, 0.0);
        let mut y = self.y.clone().resize_horizontally(r + l, 0.0);
        x.columns_mut(r, l).copy_from(x_l);
        y.columns_mut(r, l).copy_from(y_l);
        self.x = x;
        self.y = y;
        Ok(())
    }

    /// Keeps the first `r` rank-one terms.
    pub fn leading(&self, r: usize) -> LowRankInverse {
        let r = r.min(self.rank());
        LowRankInverse {
            x: self.x.columns(0, r).into_owned(),
            y: self.y.columns(0, r).into_owned(),
        }
    }
}

impl LinearOperator for LowRankInverse {
    fn input_dim(&self) -> usize {
        self.y.nrows()
    }

    fn output_dim(&self) -> usize {
        self.x.nrows()
    }

    fn apply(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.y.nrows() {
            return Err(OrimError::DimensionMismatch {
                context: "low-rank operator application",
                expected: format!("{} rows", self.y.nrows()),
                got: format!("{} rows", b.nrows()),
            });
        }
        if self.rank() == 0 {
            return Ok(DMatrix::zeros(self.x.nrows(), b.ncols()));
        }
        let coeffs = self.y.tr_mul(b);
        Ok(&self.x * coeffs)
    }
}

/// Per-sample errors `e_k` and their mean `f_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleErrors {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// Residuals `Z b_k - xi_k` for every sample, as an `n x K` matrix.
pub fn residuals<O: LinearOperator + ?Sized>(op: &O, data: &TrainingSet) -> Result<DMatrix<f64>> {
    if op.input_dim() != data.observation_dim() || op.output_dim() != data.truth_dim() {
        return Err(OrimError::DimensionMismatch {
            context: "operator vs training set",
            expected: format!("{}x{}", data.truth_dim(), data.observation_dim()),
            got: format!("{}x{}", op.output_dim(), op.input_dim()),
        });
    }
    Ok(op.apply(data.observations())? - data.truths())
}

/// `f_K(Z) = (1/K) sum_k rho(Z b_k - xi_k)` together with every `e_k`.
pub fn sample_mean_error<O: LinearOperator + ?Sized>(
    measure: &ErrorMeasure,
    op: &O,
    data: &TrainingSet,
    summation: Summation,
) -> Result<SampleErrors> {
    measure.validate()?;
    let e = residuals(op, data)?;
    let per_sample = measure.column_values(&e, summation)?;
    let mean = summation.sum(&per_sample) / per_sample.len() as f64;
    Ok(SampleErrors { per_sample, mean })
}
