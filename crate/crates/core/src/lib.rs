//! Learned low-rank reconstruction operators for linear inverse problems.
//!
//! Given pairs of observations `b_k` and ground truths `xi_k`, the crate fits
//! operators `Z = X Y^T` of bounded rank that minimize the empirical
//! reconstruction error, either in closed form (squared error) or by greedy
//! rank updates (general error measures).

pub mod baselines;
pub mod bayes;
pub mod closedform;
pub mod datagen;
pub mod error;
pub mod evalstats;
pub mod linalg;
pub mod model;
pub mod rankupdate;

pub use nalgebra::{DMatrix, DVector};

pub use closedform::{orim2, Orim2Solution, Orim2Solver};
pub use error::{OrimError, Result};
pub use evalstats::{error_report, ErrorReport, RankSweep};
pub use model::{sample_mean_error, ErrorMeasure, LinearOperator, LowRankInverse, Summation, TrainingSet};
pub use rankupdate::{rank_update_solve, UpdateConfig, UpdateHistory};
