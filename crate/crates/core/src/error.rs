use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dims {0:?}: every axis must be >= 1")]
    InvalidDims([usize; 3]),
    #[error("invalid voxel size {0:?}: every axis must be > 0")]
    InvalidVoxelSize([f64; 3]),
    #[error("dims {0:?} overflow the addressable voxel count")]
    DimOverflow([usize; 3]),
    #[error("data length {got} does not match dims product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("unit mismatch: {0} vs {1}")]
    UnitMismatch(String, String),
    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),
    #[error("b0 direction {0:?} is not a unit vector")]
    NonUnitB0([f64; 3]),
    #[error("mask is not binary at voxel {0}")]
    NonBinaryMask(usize),
    #[error("mask is empty")]
    EmptyMask,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unknown unit tag {0:?}")]
    UnknownUnit(String),
    #[error("truncated payload: expected {expected} bytes, found {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("payload length mismatch: dims require {expected} bytes, found {got}")]
    PayloadMismatch { expected: usize, got: usize },
    #[error("conjugate gradient did not converge in {iters} iterations (relative residual {residual:.3e})")]
    CgNotConverged { iters: usize, residual: f64 },
    #[error("solver diverged at iteration {iter}: objective {objective:.3e} exceeds 10x the initial {initial:.3e}")]
    Diverged { iter: usize, objective: f64, initial: f64 },
    #[error("could not place shape after {0} attempts: shape larger than volume")]
    ShapePlacement(usize),
    #[error("index {index} out of range for axis of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
