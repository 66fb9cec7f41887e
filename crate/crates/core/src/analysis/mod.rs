//! Second-order analysis of why averaging checkpoints lowers the loss.
//!
//! Around an optimum θ* the loss is approximately quadratic, so the merged
//! model's loss can be predicted from the pairwise products δ_iᵀHδ_j of the
//! checkpoints' deviations. [`QuadraticOracle`] makes that exact, which lets
//! the prediction be checked against direct evaluation.

mod hessian;
mod quadratic;
mod surface;

pub use hessian::empirical_hessian;
pub use quadratic::{
    quadratic_loss, taylor_report, QuadraticOracle, TaylorReport, SYMMETRY_TOLERANCE, TIE_BAND,
};
pub use surface::{surface_grid, GridRange, SurfaceGrid, POINTS_FILE, SURFACE_FILE};

use thiserror::Error;

/// Largest dimension for which dense Hessians are formed.
pub const MAX_DENSE_DIM: usize = 200;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least 2 models, got {0}")]
    TooFewModels(usize),
    #[error("hessian is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("hessian is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("dimension {d} exceeds the dense limit of {max}")]
    TooLarge { d: usize, max: usize },
    #[error("non-finite loss while probing at {0:?}")]
    NonFinite(Vec<f64>),
    #[error("axis {axis} out of range for {dim} parameters")]
    AxisOutOfRange { axis: usize, dim: usize },
    #[error("surface axes must differ (both are {0})")]
    SameAxis(usize),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
