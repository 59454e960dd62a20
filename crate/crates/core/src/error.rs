use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("tiling exceeds Nyquist: {0}")]
    TilingExceedsNyquist(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("sampling too coarse, refine: {0}")]
    RefineSampling(String),
    #[error("cover gap at {count} lattice samples (first at {first:?})")]
    CoverGap { count: usize, first: [usize; 3] },
    #[error("rank cap {rank} reached with max error {achieved:.3e}")]
    RankCap { rank: usize, achieved: f64 },
    #[error("ray left the computational domain: {0}")]
    RayTruncated(String),
    #[error("CFL violation: {0}")]
    Cfl(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing upstream artifact: {0}")]
    Upstream(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
