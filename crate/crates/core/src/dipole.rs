//! Dipole kernel and the susceptibility-to-field forward model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fft::Fft3;
use crate::volume::{idx, voxel_count, B0Direction, Dims, KGrid, Mask, Unit, Volume};

/// k-space dipole response `D(k) = 1/3 - (k.h)^2 / |k|^2`, `D(0) = 0`,
/// stored in the unshifted FFT layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DipoleKernel {
    dims: Dims,
    voxel_size: [f64; 3],
    b0: B0Direction,
    values: Vec<f64>,
}

impl DipoleKernel {
    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }
    pub fn b0(&self) -> B0Direction {
        self.b0
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[idx(self.dims, x, y, z)]
    }
}

pub fn build_dipole_kernel(dims: Dims, voxel_size: [f64; 3], b0: B0Direction) -> Result<DipoleKernel> {
    // re-validate: callers may hold a direction deserialized without checks
    let h = B0Direction::new(b0.as_array())?.as_array();
    let grid = KGrid::new(dims, voxel_size)?;
    let mut values = Vec::with_capacity(voxel_count(dims)?);
    for &kz in &grid.kz {
        for &ky in &grid.ky {
            for &kx in &grid.kx {
                let k2 = kx * kx + ky * ky + kz * kz;
                let v = if k2 == 0.0 {
                    0.0
                } else {
                    let kh = kx * h[0] + ky * h[1] + kz * h[2];
                    1.0 / 3.0 - kh * kh / k2
                };
                values.push(v);
            }
        }
    }
    Ok(DipoleKernel { dims, voxel_size, b0, values })
}

/// Embeds `vol` at the origin corner of a grid twice as large on every axis.
pub fn pad_double(vol: &Volume) -> Result<Volume> {
    let d = vol.dims();
    let p = [2 * d[0], 2 * d[1], 2 * d[2]];
    let mut out = Volume::zeros(p, vol.voxel_size(), vol.unit())?.with_b0(vol.b0());
    for z in 0..d[2] {
        for y in 0..d[1] {
            let src = idx(d, 0, y, z);
            let dst = idx(p, 0, y, z);
            out.data_mut()[dst..dst + d[0]].copy_from_slice(&vol.data()[src..src + d[0]]);
        }
    }
    Ok(out)
}

/// Inverse of [`pad_double`]: keeps the origin corner of size `dims`.
pub fn crop(vol: &Volume, dims: Dims) -> Result<Volume> {
    let p = vol.dims();
    if (0..3).any(|a| dims[a] > p[a]) {
        return Err(Error::DimMismatch(dims, p));
    }
    let mut data = Vec::with_capacity(voxel_count(dims)?);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let src = idx(p, 0, y, z);
            data.extend_from_slice(&vol.data()[src..src + dims[0]]);
        }
    }
    Ok(Volume::new(dims, vol.voxel_size(), vol.unit(), data)?.with_b0(vol.b0()))
}

/// Applies a kernel with a pre-built plan: `Re(ifft(D * fft(x)))`.
pub fn apply_kernel(plan: &Fft3, kernel: &DipoleKernel, data: &[f64]) -> Vec<f64> {
    plan.filter_real(data, &kernel.values)
}

/// Field induced by `chi` (ppm). With `pad`, `chi` is zero-padded to double
/// size before the circular convolution and the result is cropped back.
pub fn forward_field(chi: &Volume, kernel: &DipoleKernel, pad: bool) -> Result<Volume> {
    chi.ensure_same_dims(kernel.dims())?;
    if chi.unit() != Unit::Ppm {
        return Err(Error::UnitMismatch(chi.unit().to_string(), Unit::Ppm.to_string()));
    }
    chi.ensure_finite()?;
    let out = if pad {
        let padded = pad_double(chi)?;
        let big = build_dipole_kernel(padded.dims(), kernel.voxel_size(), kernel.b0())?;
        let plan = Fft3::new(padded.dims())?;
        let field = padded.with_data(Unit::Ppm, apply_kernel(&plan, &big, padded.data()))?;
        crop(&field, chi.dims())?
    } else {
        let plan = Fft3::new(chi.dims())?;
        chi.with_data(Unit::Ppm, apply_kernel(&plan, kernel, chi.data()))?
    };
    Ok(out.with_b0(Some(kernel.b0())))
}

/// Adds seeded Gaussian noise inside `mask` with `sigma = rms_mask(field) / snr`;
/// zeros outside. `snr = inf` is the noiseless limit.
pub fn simulate_measurement(field: &Volume, mask: &Mask, snr: f64, seed: u64) -> Result<Volume> {
    field.ensure_same_dims(mask.dims())?;
    if !(snr > 0.0) {
        return Err(Error::InvalidParameter(format!("snr must be > 0, got {snr}")));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mut out = field.masked(mask)?;
    if snr.is_infinite() {
        return Ok(out);
    }
    let rms = (mask.indices().map(|i| field.data()[i].powi(2)).sum::<f64>() / n as f64).sqrt();
    let sigma = rms / snr;
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idxs: Vec<usize> = mask.indices().collect();
    let data = out.data_mut();
    for i in idxs {
        data[i] += normal.sample(&mut rng);
    }
    Ok(out)
}
