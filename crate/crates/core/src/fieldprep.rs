//! From phase to tissue field: multi-echo slope fitting and RESHARP
//! background-field removal.

use serde::{Deserialize, Serialize};

use crate::cg::conjugate_gradient;
use crate::error::{Error, Result};
use crate::fft::Fft3;
use crate::morphology::{erode_mask, sphere_offsets};
use crate::volume::{idx, Dims, Mask, Unit, Volume};

/// Proton gyromagnetic ratio over 2π, in MHz/T.
pub const GAMMA_BAR_MHZ_PER_T: f64 = 42.577_478_518;

#[derive(Clone, Debug)]
pub struct Echo {
    pub te_ms: f64,
    /// Temporally unwrapped phase in radians.
    pub phase: Volume,
    pub magnitude: Option<Volume>,
}

#[derive(Clone, Debug)]
pub struct EchoSeries {
    pub echoes: Vec<Echo>,
}

impl EchoSeries {
    pub fn validate(&self) -> Result<Dims> {
        if self.echoes.len() < 2 {
            return Err(Error::InvalidParameter(format!("field fit needs >= 2 echoes, got {}", self.echoes.len())));
        }
        let dims = self.echoes[0].phase.dims();
        for w in self.echoes.windows(2) {
            if !(w[1].te_ms > w[0].te_ms) {
                return Err(Error::InvalidParameter("echo times must be strictly increasing".into()));
            }
        }
        for e in &self.echoes {
            e.phase.ensure_same_dims(dims)?;
            if e.phase.unit() != Unit::Radians {
                return Err(Error::UnitMismatch(e.phase.unit().to_string(), Unit::Radians.to_string()));
            }
            if let Some(m) = &e.magnitude {
                m.ensure_same_dims(dims)?;
            }
        }
        Ok(dims)
    }
}

#[derive(Clone, Debug)]
pub struct FieldFit {
    /// Off-resonance frequency in Hz, zero outside the mask.
    pub field: Volume,
    /// Masked voxels whose weights were all zero (slope forced to 0).
    pub flagged: Vec<usize>,
}

/// Weighted least-squares slope of phase against echo time. Weights are
/// squared magnitudes when every echo carries one, otherwise uniform.
pub fn fit_field(series: &EchoSeries, mask: &Mask) -> Result<FieldFit> {
    let dims = series.validate()?;
    mask.as_volume().ensure_same_dims(dims)?;
    let use_mag = series.echoes.iter().all(|e| e.magnitude.is_some());
    let tes: Vec<f64> = series.echoes.iter().map(|e| e.te_ms).collect();
    let mut out = vec![0.0; mask.as_volume().len()];
    let mut flagged = Vec::new();
    let mut w = vec![0.0; tes.len()];
    for i in mask.indices() {
        for (k, e) in series.echoes.iter().enumerate() {
            w[k] = match (&e.magnitude, use_mag) {
                (Some(m), true) => m.data()[i].powi(2),
                _ => 1.0,
            };
        }
        let sw: f64 = w.iter().sum();
        if sw <= 0.0 {
            flagged.push(i);
            continue;
        }
        let te_bar = w.iter().zip(&tes).map(|(a, t)| a * t).sum::<f64>() / sw;
        let ph_bar = w.iter().zip(&series.echoes).map(|(a, e)| a * e.phase.data()[i]).sum::<f64>() / sw;
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, e) in series.echoes.iter().enumerate() {
            let dt = tes[k] - te_bar;
            num += w[k] * dt * (e.phase.data()[i] - ph_bar);
            den += w[k] * dt * dt;
        }
        if den <= 0.0 {
            flagged.push(i);
            continue;
        }
        // rad/ms -> Hz
        out[i] = num / den * 1000.0 / std::f64::consts::TAU;
    }
    let field = series.echoes[0].phase.with_data(Unit::Hz, out)?;
    Ok(FieldFit { field, flagged })
}

/// Hz to ppm at field strength `b0_tesla`.
pub fn hz_to_ppm(field: &Volume, b0_tesla: f64) -> Result<Volume> {
    if field.unit() != Unit::Hz {
        return Err(Error::UnitMismatch(field.unit().to_string(), Unit::Hz.to_string()));
    }
    let scale = 1.0 / (GAMMA_BAR_MHZ_PER_T * b0_tesla);
    let mut out = field.scaled(scale);
    out.set_unit(Unit::Ppm);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResharpConfig {
    pub radius_mm: f64,
    pub tikhonov_lambda: f64,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
}

impl Default for ResharpConfig {
    fn default() -> Self {
        Self { radius_mm: 6.0, tikhonov_lambda: 1e-3, cg_max_iters: 200, cg_tol: 1e-6 }
    }
}

/// Normalized spherical-mean-value kernel spectrum (real; DC = 1).
pub fn smv_spectrum(dims: Dims, voxel_size: [f64; 3], radius_mm: f64, plan: &Fft3) -> Vec<f64> {
    let offsets = sphere_offsets(radius_mm, voxel_size);
    let w = 1.0 / offsets.len() as f64;
    let mut k = vec![0.0; dims.iter().product()];
    for o in &offsets {
        let q = [0, 1, 2].map(|a| o[a].rem_euclid(dims[a] as isize) as usize);
        k[idx(dims, q[0], q[1], q[2])] += w;
    }
    plan.forward_real(&k).into_iter().map(|c| c.re).collect()
}

#[derive(Clone, Debug)]
pub struct ResharpOutcome {
    pub local_field: Volume,
    pub reliable_mask: Mask,
    pub cg_iterations: usize,
    pub cg_residual: f64,
}

/// Solves `min_x ||M (I - S)(f - x)||^2 + lambda ||x||^2` by CG, where `S`
/// is the spherical mean of radius `radius_mm` and `M` the mask eroded by
/// the same radius.
pub fn resharp(total_field: &Volume, mask: &Mask, cfg: &ResharpConfig) -> Result<ResharpOutcome> {
    let dims = total_field.dims();
    total_field.ensure_same_dims(mask.dims())?;
    total_field.ensure_finite()?;
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let vs = total_field.voxel_size();
    if !(cfg.tikhonov_lambda > 0.0) {
        return Err(Error::InvalidParameter("tikhonov_lambda must be > 0".into()));
    }
    for a in 0..3 {
        if cfg.radius_mm < vs[a] {
            return Err(Error::InvalidParameter(format!("radius {} mm covers < 1 voxel on axis {a}", cfg.radius_mm)));
        }
        if 2.0 * cfg.radius_mm / vs[a] >= dims[a] as f64 {
            return Err(Error::InvalidParameter(format!("radius {} mm does not fit the field of view", cfg.radius_mm)));
        }
    }
    let reliable = erode_mask(mask, cfg.radius_mm)?;
    let plan = Fft3::new(dims)?;
    let hp: Vec<f64> = smv_spectrum(dims, vs, cfg.radius_mm, &plan).into_iter().map(|s| 1.0 - s).collect();
    let m = reliable.as_volume().data();

    let masked_hp = |v: &[f64]| -> Vec<f64> {
        let mut y = plan.filter_real(v, &hp);
        for (yi, mi) in y.iter_mut().zip(m) {
            *yi *= mi;
        }
        plan.filter_real(&y, &hp)
    };
    let b = masked_hp(total_field.data());
    let lambda = cfg.tikhonov_lambda;
    let op = |v: &[f64]| -> Vec<f64> {
        let mut y = masked_hp(v);
        for (yi, vi) in y.iter_mut().zip(v) {
            *yi += lambda * vi;
        }
        y
    };
    let sol = conjugate_gradient(op, &b, cfg.cg_tol, cfg.cg_max_iters)?;
    let data = sol.x.iter().zip(m).map(|(x, mi)| x * mi).collect();
    Ok(ResharpOutcome {
        local_field: total_field.with_data(total_field.unit(), data)?,
        reliable_mask: reliable,
        cg_iterations: sol.iterations,
        cg_residual: sol.relative_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dipole::{build_dipole_kernel, forward_field};
    use crate::phantom::Shape;
    use crate::volume::B0Direction;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const CLINICAL_TES: [f64; 7] = [12.6, 16.7, 20.8, 24.9, 29.0, 33.1, 37.2];

    fn series_from(d: Dims, tes: &[f64], phase: impl Fn(usize, f64) -> f64) -> EchoSeries {
        EchoSeries {
            echoes: tes
                .iter()
                .map(|&te| {
                    let data = (0..d.iter().product()).map(|i| phase(i, te)).collect();
                    Echo { te_ms: te, phase: Volume::new(d, [1.0; 3], Unit::Radians, data).unwrap(), magnitude: None }
                })
                .collect(),
        }
    }

    #[test]
    fn exact_linear_phase_recovers_frequency() {
        let d = [4, 3, 2];
        // f in cycles/ms, so 2*pi*f*TE is in radians
        let f = |i: usize| 0.01 * (i as f64 - 10.0);
        let s = series_from(d, &CLINICAL_TES, |i, te| 0.3 + std::f64::consts::TAU * f(i) * te);
        let mask = Mask::full(d, [1.0; 3]).unwrap();
        let fit = fit_field(&s, &mask).unwrap();
        assert_eq!(fit.field.unit(), Unit::Hz);
        for i in 0..24 {
            assert!((fit.field.data()[i] / 1000.0 - f(i)).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_phase_gives_zero_field() {
        let d = [3, 3, 3];
        let s = series_from(d, &CLINICAL_TES, |_, _| 1.2);
        let fit = fit_field(&s, &Mask::full(d, [1.0; 3]).unwrap()).unwrap();
        assert!(fit.field.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn rejects_bad_series() {
        let d = [2, 2, 2];
        let mask = Mask::full(d, [1.0; 3]).unwrap();
        assert!(fit_field(&series_from(d, &[5.0], |_, _| 0.0), &mask).is_err());
        assert!(fit_field(&series_from(d, &[5.0, 5.0], |_, _| 0.0), &mask).is_err());
    }

    #[test]
    fn zero_magnitude_voxels_are_flagged() {
        let d = [2, 1, 1];
        let mut s = series_from(d, &[5.0, 10.0], |_, te| te * 0.01);
        for e in s.echoes.iter_mut() {
            e.magnitude = Some(Volume::new(d, [1.0; 3], Unit::Dimensionless, vec![1.0, 0.0]).unwrap());
        }
        let fit = fit_field(&s, &Mask::full(d, [1.0; 3]).unwrap()).unwrap();
        assert_eq!(fit.flagged, vec![1]);
        assert_eq!(fit.field.data()[1], 0.0);
    }

    #[test]
    fn noisy_slope_variance_matches_closed_form() {
        // 7 echoes at 12.6 ms + 4.1 ms spacing; var(slope) = sigma^2 / sum (TE - mean)^2
        let d = [100, 100, 1];
        let sigma = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let noise = Normal::new(0.0, sigma).unwrap();
        let n = 10_000;
        let noisy: Vec<Vec<f64>> =
            CLINICAL_TES.iter().map(|_| (0..n).map(|_| noise.sample(&mut rng)).collect()).collect();
        let true_slope = 0.05; // rad/ms
        let s = EchoSeries {
            echoes: CLINICAL_TES
                .iter()
                .enumerate()
                .map(|(k, &te)| {
                    let data = (0..n).map(|i| true_slope * te + noisy[k][i]).collect();
                    Echo { te_ms: te, phase: Volume::new(d, [1.0; 3], Unit::Radians, data).unwrap(), magnitude: None }
                })
                .collect(),
        };
        let fit = fit_field(&s, &Mask::full(d, [1.0; 3]).unwrap()).unwrap();
        let to_rad_ms = std::f64::consts::TAU / 1000.0;
        let mse = fit.field.data().iter().map(|f| (f * to_rad_ms - true_slope).powi(2)).sum::<f64>() / n as f64;
        let mean_te = CLINICAL_TES.iter().sum::<f64>() / 7.0;
        let sxx: f64 = CLINICAL_TES.iter().map(|t| (t - mean_te).powi(2)).sum();
        let predicted = sigma * sigma / sxx;
        let ratio = mse.sqrt() / predicted.sqrt();
        assert!((0.8..=1.2).contains(&ratio), "rms ratio {ratio}");
    }

    #[test]
    fn smv_kernel_is_normalized() {
        let d = [16, 12, 10];
        let plan = Fft3::new(d).unwrap();
        let s = smv_spectrum(d, [1.0, 1.0, 1.5], 3.0, &plan);
        assert!((s[0] - 1.0).abs() < 1e-12);
    }

    fn brain(d: Dims, r: f64) -> Mask {
        let c = d.map(|n| n as f64 / 2.0);
        Mask::from_fn(d, [1.0; 3], |x, y, z| {
            (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2) <= r * r
        })
        .unwrap()
    }

    fn rms_in(v: &Volume, m: &Mask) -> f64 {
        (m.indices().map(|i| v.data()[i].powi(2)).sum::<f64>() / m.count() as f64).sqrt()
    }

    fn source(d: Dims, c: [f64; 3], r: f64, val: f64) -> Volume {
        let mut chi = Volume::zeros(d, [1.0; 3], Unit::Ppm).unwrap();
        Shape::sphere(c, r, val).rasterize(&mut chi);
        chi
    }

    #[test]
    fn zero_field_gives_zero_and_mask_is_erosion() {
        let d = [32, 32, 32];
        let mask = brain(d, 12.0);
        let z = Volume::zeros(d, [1.0; 3], Unit::Ppm).unwrap();
        let cfg = ResharpConfig { radius_mm: 3.0, ..Default::default() };
        let out = resharp(&z, &mask, &cfg).unwrap();
        assert!(out.local_field.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.reliable_mask, erode_mask(&mask, 3.0).unwrap());
    }

    #[test]
    fn removes_external_and_keeps_internal_sources() {
        let d = [48, 48, 48];
        let mask = brain(d, 17.0);
        let k = build_dipole_kernel(d, [1.0; 3], B0Direction::Z).unwrap();
        let cfg = ResharpConfig { radius_mm: 4.0, ..Default::default() };

        let ext = forward_field(&source(d, [6.0, 8.0, 40.0], 4.0, 2.0), &k, true).unwrap();
        let out = resharp(&ext, &mask, &cfg).unwrap();
        let rel = rms_in(&out.local_field, &out.reliable_mask) / rms_in(&ext, &out.reliable_mask);
        assert!(rel < 0.10, "external residual {rel}");

        let int = forward_field(&source(d, [24.0, 22.0, 25.0], 3.0, 0.5), &k, true).unwrap();
        let out2 = resharp(&int, &mask, &cfg).unwrap();
        let diff = out2.local_field.checked_sub(&int).unwrap();
        let rel2 = rms_in(&diff, &out2.reliable_mask) / rms_in(&int, &out2.reliable_mask);
        assert!(rel2 < 0.15, "internal error {rel2}");

        // linearity
        let both = resharp(&ext.checked_add(&int).unwrap(), &mask, &cfg).unwrap();
        let sum = out.local_field.checked_add(&out2.local_field).unwrap();
        let err = both.local_field.checked_sub(&sum).unwrap().norm() / sum.norm();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn cg_failure_reports_residual() {
        let d = [24, 24, 24];
        let mask = brain(d, 9.0);
        let k = build_dipole_kernel(d, [1.0; 3], B0Direction::Z).unwrap();
        let f = forward_field(&source(d, [12.0, 12.0, 12.0], 2.0, 1.0), &k, false).unwrap();
        let cfg = ResharpConfig { radius_mm: 3.0, cg_max_iters: 2, cg_tol: 1e-12, ..Default::default() };
        assert!(matches!(resharp(&f, &mask, &cfg), Err(Error::CgNotConverged { .. })));
    }
}
