//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model would contain a zero eigenvalue: {0}")]
    ZeroEigenvalue(String),

    #[error("unsupported model configuration: {0}")]
    UnsupportedModel(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("quadrature grid underresolved: grid {grid} < 4 x max frequency {max_freq}")]
    QuadratureUnderresolved { grid: usize, max_freq: usize },

    #[error("no zero crossing of the potential along a sampled ray (direction {0})")]
    NoZeroCrossing(usize),

    #[error("multiple radial zero crossings along a sampled ray (direction {0}): level set not starshaped")]
    MultipleCrossings(usize),

    #[error("record is not a critical circle")]
    NotACircle,

    #[error("persistent degeneracy after {0} perturbation escalations")]
    PersistentDegeneracy(usize),

    #[error("degenerate Hessian: {zeros} zero modes where at most {allowed} allowed")]
    DegenerateHessian { zeros: usize, allowed: usize },

    #[error("invalid index gap between orbit endpoints: {source_index} vs {target_index}")]
    IndexGapInvalid { source_index: i32, target_index: i32 },

    #[error("index mismatch for continuation orbit: {source_index} vs {target_index}")]
    IndexMismatch { source_index: i32, target_index: i32 },

    #[error("record {0} is not graded or not Morse enough for orbit search")]
    RecordNotReady(usize),

    #[error("flow blow-up: E-norm exceeded {0:.3e}")]
    BlowUp(f64),

    #[error("inner kernel minimization failed to converge (grad norm {0:.3e})")]
    NonConvergence(f64),

    #[error("boundary operator does not square to zero (degree {degree})")]
    BoundarySquareNonzero { degree: i32 },

    #[error("sampled |F1 - F2| = {0:.3e} exceeds the boundedness cap")]
    UnboundedDifference(f64),

    #[error("continuation map is not a chain map (degree {degree})")]
    ChainMapViolation { degree: i32 },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}
