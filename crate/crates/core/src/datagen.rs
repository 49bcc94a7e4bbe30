//! Synthetic training data: piecewise-constant 1D signals under Gaussian
//! convolution and 2D circle images under a Gaussian PSF with reflexive
//! boundaries, observed with additive white noise at a prescribed level.
//!
//! All randomness comes from ChaCha8 streams. Column `k` of any generated
//! matrix draws from stream `k` of a generator seeded with the caller's seed,
//! so every column is a pure function of `(seed, k)` and the matrices are
//! identical no matter how the work is scheduled.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{OrimError, Result};
use crate::model::{LinearOperator, TrainingSet};

/// Smallest and largest number of jumps in a generated 1D signal.
pub const MIN_JUMPS: usize = 3;
pub const MAX_JUMPS: usize = 20;

/// Generator for substream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a seed with a tag (splitmix64 finalizer) so that independent
/// purposes (signals, noise, validation split) get unrelated seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn build_columns<F>(rows: usize, count: usize, seed: u64, fill: F) -> DMatrix<f64>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    let cols: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let mut col = vec![0.0; rows];
            fill(&mut rng, &mut col);
            col
        })
        .collect();
    let mut out = DMatrix::zeros(rows, count);
    for (k, col) in cols.iter().enumerate() {
        out.column_mut(k).copy_from_slice(col);
    }
    out
}

/// Piecewise-constant signals of length `n`, one per column.
///
/// The number of jumps is uniform on `3..=20` (capped at `n - 1`), jump
/// positions are distinct grid cells chosen uniformly, and each plateau level
/// is uniform on `[0, 1)`.
pub fn gen_signals_1d(n: usize, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n < 2 {
        return Err(OrimError::InvalidParameter(format!(
            "signal length must be >= 2, got {n}"
        )));
    }
    if count == 0 {
        return Err(OrimError::InvalidParameter("signal count must be >= 1".into()));
    }
    Ok(build_columns(n, count, seed, |rng, col| {
        let jumps = rng.random_range(MIN_JUMPS..=MAX_JUMPS).min(n - 1);
        let mut positions: Vec<usize> = index::sample(rng, n - 1, jumps).into_iter().map(|p| p + 1).collect();
        positions.sort_unstable();
        let mut level: f64 = rng.random();
        let mut next = positions.iter().peekable();
        for (i, v) in col.iter_mut().enumerate() {
            if next.peek() == Some(&&i) {
                next.next();
                level = rng.random();
            }
            *v = level;
        }
    }))
}

/// Normalized Gaussian weights on `-R..=R` with `R = ceil(4 sigma)`.
pub fn gaussian_kernel(variance: f64) -> Result<Vec<f64>> {
    if !(variance.is_finite() && variance > 0.0) {
        return Err(OrimError::InvalidParameter(format!(
            "kernel variance must be positive, got {variance}"
        )));
    }
    let radius = (4.0 * variance.sqrt()).ceil().max(1.0) as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * variance)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// 1D Gaussian convolution as a dense symmetric Toeplitz matrix; the kernel
/// is cut off at the domain edges (zero boundary).
#[derive(Debug, Clone)]
pub struct ForwardModel1D {
    pub n: usize,
    pub kernel_variance: f64,
    pub matrix: DMatrix<f64>,
}

pub fn build_conv_matrix_1d(n: usize, variance: f64) -> Result<ForwardModel1D> {
    if n == 0 {
        return Err(OrimError::InvalidParameter("signal length must be >= 1".into()));
    }
    let w = gaussian_kernel(variance)?;
    let radius = (w.len() / 2) as isize;
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        let d = i as isize - j as isize;
        if d.abs() <= radius {
            w[(d + radius) as usize]
        } else {
            0.0
        }
    });
    Ok(ForwardModel1D {
        n,
        kernel_variance: variance,
        matrix,
    })
}

impl LinearOperator for ForwardModel1D {
    fn input_dim(&self) -> usize {
        self.n
    }
    fn output_dim(&self) -> usize {
        self.n
    }
    fn apply(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.matrix.apply(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Half-sample symmetric extension: `x[-1] = x[0]`, `x[-2] = x[1]`, ...
    Reflexive,
}

/// Maps an out-of-range index into `0..n` by mirror reflection.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let j = i.rem_euclid(period);
    if j >= n as isize {
        (period - 1 - j) as usize
    } else {
        j as usize
    }
}

/// Spatially invariant Gaussian blur of `side x side` images (row-major
/// vectorization), never materialized as a matrix.
#[derive(Debug, Clone)]
pub struct ForwardModel2D {
    pub side: usize,
    pub psf_variance: f64,
    pub boundary: Boundary,
    kernel: Vec<f64>,
}

impl ForwardModel2D {
    pub fn new(side: usize, psf_variance: f64) -> Result<Self> {
        if side == 0 {
            return Err(OrimError::InvalidParameter("image side must be >= 1".into()));
        }
        Ok(ForwardModel2D {
            side,
            psf_variance,
            boundary: Boundary::Reflexive,
            kernel: gaussian_kernel(psf_variance)?,
        })
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    /// The separable 1D factor of the PSF.
    pub fn kernel_1d(&self) -> &[f64] {
        &self.kernel
    }

    /// Blurs one vectorized image.
    pub fn apply_blur_2d(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != self.pixels() {
            return Err(OrimError::DimensionMismatch {
                context: "2D blur input",
                expected: format!("{} pixels", self.pixels()),
                got: format!("{} pixels", image.len()),
            });
        }
        let s = self.side;
        let radius = (self.kernel.len() / 2) as isize;
        let mut tmp = vec![0.0; s * s];
        // along rows
        for r in 0..s {
            for c in 0..s {
                let mut acc = 0.0;
                for (t, w) in self.kernel.iter().enumerate() {
                    let cc = reflect(c as isize + t as isize - radius, s);
                    acc += w * image[r * s + cc];
                }
                tmp[r * s + c] = acc;
            }
        }
        // along columns
        let mut out = vec![0.0; s * s];
        for r in 0..s {
            for c in 0..s {
                let mut acc = 0.0;
                for (t, w) in self.kernel.iter().enumerate() {
                    let rr = reflect(r as isize + t as isize - radius, s);
                    acc += w * tmp[rr * s + c];
                }
                out[r * s + c] = acc;
            }
        }
        Ok(out)
    }

    /// Dense `side^2 x side^2` matrix, assembled column by column from blurred
    /// basis images.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let p = self.pixels();
        let mut out = DMatrix::zeros(p, p);
        let mut basis = vec![0.0; p];
        for j in 0..p {
            basis[j] = 1.0;
            let col = self.apply_blur_2d(&basis).expect("basis has the right size");
            out.column_mut(j).copy_from_slice(&col);
            basis[j] = 0.0;
        }
        out
    }
}

impl LinearOperator for ForwardModel2D {
    fn input_dim(&self) -> usize {
        self.pixels()
    }
    fn output_dim(&self) -> usize {
        self.pixels()
    }
    fn apply(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.pixels() {
            return Err(OrimError::DimensionMismatch {
                context: "2D blur input",
                expected: format!("{} rows", self.pixels()),
                got: format!("{} rows", b.nrows()),
            });
        }
        let cols: Vec<Vec<f64>> = (0..b.ncols())
            .into_par_iter()
            .map(|k| self.apply_blur_2d(b.column(k).as_slice()))
            .collect::<Result<_>>()?;
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for (k, col) in cols.iter().enumerate() {
            out.column_mut(k).copy_from_slice(col);
        }
        Ok(out)
    }
}

/// Distributions for the random circle images.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleParams {
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub max_intensity: f64,
}

impl CircleParams {
    /// 1 to 10 circles, radius uniform on `(side/25, side/6)`, intensity
    /// uniform on `(0, 1)`.
    pub fn for_side(side: usize) -> Self {
        CircleParams {
            count_min: 1,
            count_max: 10,
            radius_min: side as f64 / 25.0,
            radius_max: side as f64 / 6.0,
            max_intensity: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count_min > self.count_max {
            return Err(OrimError::InvalidParameter("circle count_min > count_max".into()));
        }
        if !(self.radius_min >= 0.0 && self.radius_min <= self.radius_max) {
            return Err(OrimError::InvalidParameter("circle radius range is invalid".into()));
        }
        if !(self.max_intensity >= 0.0 && self.max_intensity.is_finite()) {
            return Err(OrimError::InvalidParameter("max_intensity must be >= 0".into()));
        }
        Ok(())
    }
}

/// Vectorized `side x side` images of random circles, one per column.
/// Overlaps are resolved in drawing order: later circles overwrite.
pub fn gen_images_2d(side: usize, count: usize, seed: u64, params: &CircleParams) -> Result<DMatrix<f64>> {
    if side < 8 {
        return Err(OrimError::InvalidParameter(format!(
            "image side must be >= 8, got {side}"
        )));
    }
    if count == 0 {
        return Err(OrimError::InvalidParameter("image count must be >= 1".into()));
    }
    params.validate()?;
    Ok(build_columns(side * side, count, seed, |rng, img| {
        let circles = rng.random_range(params.count_min..=params.count_max);
        for _ in 0..circles {
            let cx = rng.random::<f64>() * side as f64;
            let cy = rng.random::<f64>() * side as f64;
            let radius = params.radius_min + rng.random::<f64>() * (params.radius_max - params.radius_min);
            let intensity = rng.random::<f64>() * params.max_intensity;
            let r2 = radius * radius;
            for r in 0..side {
                let dy = r as f64 + 0.5 - cy;
                for c in 0..side {
                    let dx = c as f64 + 0.5 - cx;
                    if dx * dx + dy * dy <= r2 {
                        img[r * side + c] = intensity;
                    }
                }
            }
        }
    }))
}

/// Target noise level `|delta|^2 / |A xi|^2`, fixed or drawn per sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    Fixed(f64),
    Range { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub level: NoiseLevel,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn fixed(level: f64, seed: u64) -> Self {
        NoiseSpec {
            level: NoiseLevel::Fixed(level),
            seed,
        }
    }

    pub fn range(lo: f64, hi: f64, seed: u64) -> Self {
        NoiseSpec {
            level: NoiseLevel::Range { lo, hi },
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.level {
            NoiseLevel::Fixed(l) if !(l >= 0.0 && l.is_finite()) => Err(OrimError::InvalidParameter(format!(
                "noise level must be >= 0, got {l}"
            ))),
            NoiseLevel::Range { lo, hi } if !(lo >= 0.0 && lo <= hi && hi.is_finite()) => {
                Err(OrimError::InvalidParameter(format!("invalid noise range [{lo}, {hi}]")))
            }
            _ => Ok(()),
        }
    }
}

/// Adds white Gaussian noise scaled per column so that
/// `|delta_k|^2 / |clean_k|^2` equals the column's level exactly.
pub fn add_noise(clean: &DMatrix<f64>, spec: &NoiseSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let m = clean.nrows();
    let cols: Vec<Vec<f64>> = (0..clean.ncols())
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(spec.seed, k as u64);
            let level = match spec.level {
                NoiseLevel::Fixed(l) => l,
                NoiseLevel::Range { lo, hi } => lo + rng.random::<f64>() * (hi - lo),
            };
            let col = clean.column(k);
            if level == 0.0 {
                return Ok(col.iter().copied().collect());
            }
            let norm = col.norm();
            if norm == 0.0 {
                return Err(OrimError::InvalidParameter(format!(
                    "column {k} is zero; a relative noise level is undefined"
                )));
            }
            let g: DVector<f64> = DVector::from_fn(m, |_, _| rng.sample(StandardNormal));
            let scale = level.sqrt() * norm / g.norm();
            Ok(col.iter().zip(g.iter()).map(|(c, gi)| c + scale * gi).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(m, clean.ncols());
    for (k, col) in cols.iter().enumerate() {
        out.column_mut(k).copy_from_slice(col);
    }
    Ok(out)
}

/// Realized `|noisy_k - clean_k|^2 / |clean_k|^2` per column.
pub fn noise_ratios(clean: &DMatrix<f64>, noisy: &DMatrix<f64>) -> Vec<f64> {
    (0..clean.ncols())
        .map(|k| (noisy.column(k) - clean.column(k)).norm_squared() / clean.column(k).norm_squared())
        .collect()
}

/// A seeded source of ground-truth signals.
pub trait SignalGenerator {
    fn dim(&self) -> usize;
    fn generate(&self, count: usize, seed: u64) -> Result<DMatrix<f64>>;
}

#[derive(Debug, Clone, Copy)]
pub struct PiecewiseConstant1D {
    pub n: usize,
}

impl SignalGenerator for PiecewiseConstant1D {
    fn dim(&self) -> usize {
        self.n
    }
    fn generate(&self, count: usize, seed: u64) -> Result<DMatrix<f64>> {
        gen_signals_1d(self.n, count, seed)
    }
}

#[derive(Debug, Clone)]
pub struct Circles2D {
    pub side: usize,
    pub params: CircleParams,
}

impl SignalGenerator for Circles2D {
    fn dim(&self) -> usize {
        self.side * self.side
    }
    fn generate(&self, count: usize, seed: u64) -> Result<DMatrix<f64>> {
        gen_images_2d(self.side, count, seed, &self.params)
    }
}

const SIGNAL_TAG: u64 = 1;

/// Draws `count` ground truths with `seed`, blurs them, and adds noise.
/// The noise stream is derived from `(seed, noise.seed)`.
pub fn build_training_set<G, F>(
    generator: &G,
    forward: &F,
    noise: &NoiseSpec,
    count: usize,
    seed: u64,
) -> Result<TrainingSet>
where
    G: SignalGenerator + ?Sized,
    F: LinearOperator + ?Sized,
{
    if forward.input_dim() != generator.dim() {
        return Err(OrimError::DimensionMismatch {
            context: "forward operator vs signal generator",
            expected: format!("{} inputs", generator.dim()),
            got: format!("{} inputs", forward.input_dim()),
        });
    }
    let truths = generator.generate(count, derive_seed(seed, SIGNAL_TAG))?;
    let blurred = forward.apply(&truths)?;
    let noise = NoiseSpec {
        seed: derive_seed(seed, noise.seed.wrapping_add(0x5EED)),
        ..*noise
    };
    let observations = add_noise(&blurred, &noise)?;
    TrainingSet::new(observations, truths)
}
