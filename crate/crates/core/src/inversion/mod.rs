//! Dipole inversions: truncated k-space division, TV-regularized ADMM,
//! morphology-weighted L1 (MEDI-like) and multi-orientation COSMOS.

mod admm;
mod cosmos;
mod gradient;
mod tkd;

pub use admm::{
    edge_gradient_mask, invert_medi_like, invert_tv_admm, invert_weighted_tv, AdmmOutcome, MediConfig, SolveLog,
    TvAdmmConfig,
};
pub use cosmos::{invert_cosmos, CosmosConfig, CosmosOutcome, OrientationSet, OrientedField};
pub use gradient::{divergence_adjoint, forward_gradient, gradient_magnitude};
pub use tkd::{invert_tkd, tkd_filter, TkdConfig};
