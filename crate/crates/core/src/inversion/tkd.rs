use serde::{Deserialize, Serialize};

use crate::dipole::DipoleKernel;
use crate::error::{Error, Result};
use crate::fft::Fft3;
use crate::volume::{Mask, Unit, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TkdConfig {
    pub threshold: f64,
}

impl Default for TkdConfig {
    fn default() -> Self {
        Self { threshold: 0.20 }
    }
}

/// Truncated inverse kernel: `1/D` where `|D| > t`, `sign(D)/t` where
/// `0 < |D| <= t`, and 0 where `D = 0`.
pub fn tkd_filter(kernel: &DipoleKernel, threshold: f64) -> Result<Vec<f64>> {
    if !(threshold > 0.0 && threshold <= 2.0 / 3.0) {
        return Err(Error::InvalidParameter(format!("TKD threshold {threshold} outside (0, 2/3]")));
    }
    Ok(kernel
        .values()
        .iter()
        .map(|&d| {
            if d == 0.0 {
                0.0
            } else if d.abs() > threshold {
                1.0 / d
            } else {
                d.signum() / threshold
            }
        })
        .collect())
}

pub fn invert_tkd(field: &Volume, kernel: &DipoleKernel, cfg: &TkdConfig, mask: &Mask) -> Result<Volume> {
    field.ensure_same_dims(kernel.dims())?;
    field.ensure_same_dims(mask.dims())?;
    field.ensure_finite()?;
    let inv = tkd_filter(kernel, cfg.threshold)?;
    let plan = Fft3::new(field.dims())?;
    let chi = plan.filter_real(field.data(), &inv);
    field.with_data(Unit::Ppm, chi)?.masked(mask)
}
