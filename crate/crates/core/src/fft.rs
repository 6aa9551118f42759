//! 3D FFT over x-fastest volumes.
//!
//! Convention: the forward transform is unnormalized, the inverse carries the
//! full `1/N` factor, so `inverse(forward(x)) == x` and
//! `sum |x|^2 == sum |X|^2 / N`. Spectra are kept in the unshifted layout
//! (DC at index 0 on every axis).

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, Unit, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVolume {
    pub dims: Dims,
    pub data: Vec<Complex64>,
}

impl ComplexVolume {
    pub fn zeros(dims: Dims) -> Result<Self> {
        Ok(Self { dims, data: vec![Complex64::new(0.0, 0.0); voxel_count(dims)?] })
    }

    pub fn from_real(vol: &Volume) -> Self {
        Self { dims: vol.dims(), data: vol.data().iter().map(|&v| Complex64::new(v, 0.0)).collect() }
    }

    pub fn real_part(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.re).collect()
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Cached per-axis plans for one grid size.
#[derive(Clone)]
pub struct Fft3 {
    dims: Dims,
    fwd: [Arc<dyn Fft<f64>>; 3],
    inv: [Arc<dyn Fft<f64>>; 3],
}

impl std::fmt::Debug for Fft3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft3").field("dims", &self.dims).finish()
    }
}

impl Fft3 {
    pub fn new(dims: Dims) -> Result<Self> {
        voxel_count(dims)?;
        let mut planner = FftPlanner::new();
        let fwd = [0, 1, 2].map(|a| planner.plan_fft_forward(dims[a]));
        let inv = [0, 1, 2].map(|a| planner.plan_fft_inverse(dims[a]));
        Ok(Self { dims, fwd, inv })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    fn transform(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>; 3]) {
        let [nx, ny, nz] = self.dims;
        let mut scratch = Vec::new();
        let mut line = Vec::new();

        if nx > 1 {
            let plan = &plans[0];
            scratch.resize(plan.get_inplace_scratch_len(), Complex64::default());
            for row in data.chunks_exact_mut(nx) {
                plan.process_with_scratch(row, &mut scratch);
            }
        }
        if ny > 1 {
            let plan = &plans[1];
            scratch.resize(plan.get_inplace_scratch_len(), Complex64::default());
            line.resize(ny, Complex64::default());
            for z in 0..nz {
                for x in 0..nx {
                    let base = x + nx * ny * z;
                    for (y, l) in line.iter_mut().enumerate() {
                        *l = data[base + nx * y];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (y, l) in line.iter().enumerate() {
                        data[base + nx * y] = *l;
                    }
                }
            }
        }
        if nz > 1 {
            let plan = &plans[2];
            scratch.resize(plan.get_inplace_scratch_len(), Complex64::default());
            line.resize(nz, Complex64::default());
            let plane = nx * ny;
            for base in 0..plane {
                for (z, l) in line.iter_mut().enumerate() {
                    *l = data[base + plane * z];
                }
                plan.process_with_scratch(&mut line, &mut scratch);
                for (z, l) in line.iter().enumerate() {
                    data[base + plane * z] = *l;
                }
            }
        }
    }

    pub fn forward_inplace(&self, data: &mut [Complex64]) {
        debug_assert_eq!(data.len(), self.dims.iter().product::<usize>());
        self.transform(data, &self.fwd);
    }

    pub fn inverse_inplace(&self, data: &mut [Complex64]) {
        debug_assert_eq!(data.len(), self.dims.iter().product::<usize>());
        self.transform(data, &self.inv);
        let s = 1.0 / data.len() as f64;
        for c in data.iter_mut() {
            *c *= s;
        }
    }

    /// Forward transform of real samples.
    pub fn forward_real(&self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward_inplace(&mut buf);
        buf
    }

    /// Applies a real k-space filter `h` to real data: `Re(ifft(h * fft(x)))`.
    pub fn filter_real(&self, data: &[f64], h: &[f64]) -> Vec<f64> {
        let mut buf = self.forward_real(data);
        for (c, &w) in buf.iter_mut().zip(h) {
            *c *= w;
        }
        self.inverse_inplace(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }
}

pub fn fft3_forward(vol: &Volume) -> Result<ComplexVolume> {
    vol.ensure_finite()?;
    let plan = Fft3::new(vol.dims())?;
    let mut cv = ComplexVolume::from_real(vol);
    plan.forward_inplace(&mut cv.data);
    Ok(cv)
}

pub fn fft3_inverse(cv: &ComplexVolume) -> Result<ComplexVolume> {
    if let Some(i) = cv.data.iter().position(|c| !(c.re.is_finite() && c.im.is_finite())) {
        return Err(Error::NonFinite(i));
    }
    let plan = Fft3::new(cv.dims)?;
    let mut out = cv.clone();
    plan.inverse_inplace(&mut out.data);
    Ok(out)
}

/// Real part of a complex volume packaged with the geometry of `like`.
pub fn real_volume(cv: &ComplexVolume, like: &Volume, unit: Unit) -> Result<Volume> {
    like.ensure_same_dims(cv.dims)?;
    like.with_data(unit, cv.real_part())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, [1.0; 3], Unit::Dimensionless, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn constant_volume_is_dc_only() {
        let v = Volume::from_fn([4, 5, 6], [1.0; 3], Unit::Ppm, |_, _, _| 2.5).unwrap();
        let s = fft3_forward(&v).unwrap();
        assert!((s.data[0].re - 2.5 * 120.0).abs() < 1e-10);
        assert!(s.data[1..].iter().all(|c| c.norm() < 1e-10));
    }

    #[test]
    fn roundtrip_and_parseval_small_dims() {
        for nx in 1..=4 {
            for ny in 1..=4 {
                for nz in 1..=4 {
                    let v = random_volume([nx, ny, nz], (nx * 16 + ny * 4 + nz) as u64);
                    let s = fft3_forward(&v).unwrap();
                    let back = fft3_inverse(&s).unwrap();
                    assert!(max_rel_diff(&back.real_part(), v.data()) < 1e-10);
                    assert!(back.data.iter().all(|c| c.im.abs() < 1e-12));
                    let e_time: f64 = v.data().iter().map(|x| x * x).sum();
                    let e_freq = s.energy() / v.len() as f64;
                    assert!((e_time - e_freq).abs() <= 1e-9 * e_time);
                }
            }
        }
    }

    #[test]
    fn roundtrip_and_parseval_64() {
        let v = random_volume([64, 64, 64], 99);
        let s = fft3_forward(&v).unwrap();
        let back = fft3_inverse(&s).unwrap();
        assert!(max_rel_diff(&back.real_part(), v.data()) < 1e-10);
        let e_time: f64 = v.data().iter().map(|x| x * x).sum();
        assert!((e_time - s.energy() / v.len() as f64).abs() <= 1e-9 * e_time);
    }

    #[test]
    fn roundtrip_16() {
        let v = random_volume([16, 16, 16], 5);
        let back = fft3_inverse(&fft3_forward(&v).unwrap()).unwrap();
        assert!(max_rel_diff(&back.real_part(), v.data()) < 1e-10);
    }

    #[test]
    fn convolution_theorem_matches_brute_force() {
        let d = [8, 8, 8];
        let a = random_volume(d, 1);
        let b = random_volume(d, 2);
        // direct circular convolution
        let mut direct = vec![0.0; 512];
        for (p, out) in direct.iter_mut().enumerate() {
            let (px, py, pz) = crate::volume::coords(d, p);
            let mut acc = 0.0;
            for q in 0..512 {
                let (qx, qy, qz) = crate::volume::coords(d, q);
                let r = crate::volume::idx(d, (px + 8 - qx) % 8, (py + 8 - qy) % 8, (pz + 8 - qz) % 8);
                acc += a.data()[q] * b.data()[r];
            }
            *out = acc;
        }
        let fa = fft3_forward(&a).unwrap();
        let fb = fft3_forward(&b).unwrap();
        let prod = ComplexVolume { dims: d, data: fa.data.iter().zip(&fb.data).map(|(x, y)| x * y).collect() };
        let conv = fft3_inverse(&prod).unwrap().real_part();
        let err = conv.iter().zip(&direct).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "max abs error {err}");
    }

    #[test]
    fn non_finite_rejected() {
        let mut v = random_volume([2, 2, 2], 3);
        v.data_mut()[3] = f64::NAN;
        assert!(matches!(fft3_forward(&v), Err(Error::NonFinite(3))));
    }
}
