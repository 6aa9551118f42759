use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dipole::build_dipole_kernel;
use crate::error::{Error, Result};
use crate::fft::Fft3;
use crate::volume::{B0Direction, Mask, Unit, Volume};

/// Sum of squared kernels below which a k-space bin counts as ill-conditioned.
pub const ILL_CONDITIONED_BELOW: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct OrientedField {
    pub local_field: Volume,
    pub b0: B0Direction,
    pub mask: Mask,
}

/// Local fields acquired at several head orientations, registered to a common frame.
#[derive(Clone, Debug, Default)]
pub struct OrientationSet {
    pub entries: Vec<OrientedField>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosmosConfig {
    pub eps: f64,
}

impl Default for CosmosConfig {
    fn default() -> Self {
        Self { eps: 1e-9 }
    }
}

#[derive(Clone, Debug)]
pub struct CosmosOutcome {
    pub chi: Volume,
    /// Non-DC bins with `sum_i D_i^2 < 1e-6`.
    pub ill_conditioned_bins: usize,
    /// Smallest `sum_i D_i^2` over non-DC bins.
    pub min_sum_sq: f64,
    pub n_orientations: usize,
}

impl CosmosOutcome {
    pub fn well_posed(&self) -> bool {
        self.n_orientations >= 3 && self.ill_conditioned_bins == 0
    }
}

/// Per-bin least squares `chi(k) = sum D_i F_i / (sum D_i^2 + eps)`.
/// Fewer than three orientations are accepted but reported as ill-conditioned.
pub fn invert_cosmos(orients: &OrientationSet, cfg: &CosmosConfig) -> Result<CosmosOutcome> {
    let first = orients
        .entries
        .first()
        .ok_or_else(|| Error::InvalidParameter("COSMOS needs at least one orientation".into()))?;
    if !(cfg.eps >= 0.0) {
        return Err(Error::InvalidParameter("eps must be >= 0".into()));
    }
    let dims = first.local_field.dims();
    let vs = first.local_field.voxel_size();
    let n = first.local_field.len();
    let plan = Fft3::new(dims)?;
    let mut num = vec![Complex64::default(); n];
    let mut den = vec![0.0; n];
    let mut mask = first.mask.clone();
    for e in &orients.entries {
        e.local_field.ensure_same_dims(dims)?;
        e.local_field.ensure_finite()?;
        mask = mask.intersect(&e.mask)?;
        let k = build_dipole_kernel(dims, vs, e.b0)?;
        let spec = plan.forward_real(e.local_field.data());
        for i in 0..n {
            let d = k.values()[i];
            num[i] += spec[i] * d;
            den[i] += d * d;
        }
    }
    let mut ill = 0;
    let mut min_sum_sq = f64::INFINITY;
    for &d in den.iter().skip(1) {
        if d < ILL_CONDITIONED_BELOW {
            ill += 1;
        }
        min_sum_sq = min_sum_sq.min(d);
    }
    for i in 0..n {
        let d = den[i] + cfg.eps;
        num[i] = if d > 0.0 { num[i] / d } else { Complex64::default() };
    }
    plan.inverse_inplace(&mut num);
    let chi = first.local_field.with_data(Unit::Ppm, num.iter().map(|c| c.re).collect())?.masked(&mask)?;
    Ok(CosmosOutcome { chi, ill_conditioned_bins: ill, min_sum_sq, n_orientations: orients.entries.len() })
}
