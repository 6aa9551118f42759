//! Quantitative susceptibility mapping toolkit: volumes and their file
//! format, dipole physics, synthetic phantoms, background-field removal,
//! classical dipole inversions and evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cg;
pub mod dipole;
pub mod error;
pub mod export;
pub mod fft;
pub mod fieldprep;
pub mod inversion;
pub mod io;
pub mod metrics;
pub mod morphology;
pub mod phantom;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{B0Direction, Dims, KGrid, Mask, Unit, Volume};
