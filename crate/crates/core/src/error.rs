use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("multicomplex order {0} out of range (0..=3)")]
    OrderOutOfRange(usize),
    #[error("imaginary direction {dir} not available at order {order}")]
    DirectionOutOfRange { dir: usize, order: usize },
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("basis columns are not orthonormal (||U^T U - I|| = {0:e})")]
    NotOrthonormal(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid mesh: {0}")]
    Mesh(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("newton solve did not converge after {iters} iterations (residual {residual:e})")]
    NewtonDiverged { iters: usize, residual: f64 },
    #[error("linear system is singular")]
    Singular,
    #[error("rank deficient: needed {needed} nonzero singular values, found {found}")]
    RankDeficient { needed: usize, found: usize },
    #[error("nnls failed: {0}")]
    Nnls(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
