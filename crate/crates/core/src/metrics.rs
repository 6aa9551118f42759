//! Masked reconstruction-quality metrics: RMSE, HFEN and SSIM.
//!
//! HFEN filters the full volumes with a 15^3 Laplacian-of-Gaussian
//! (sigma 1.5 voxels, zero-sum) by circular convolution and then takes the
//! masked RMSE of the filtered pair, so constant offsets cancel exactly.
//! SSIM zeroes both inputs outside the mask, computes local statistics
//! with an 11^3 Gaussian window (sigma 1.5, circular boundary) and averages
//! the SSIM map over the mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft3;
use crate::volume::{idx, Dims, Mask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HfenConfig {
    pub kernel_size: usize,
    pub sigma_vox: f64,
}

impl Default for HfenConfig {
    fn default() -> Self {
        Self { kernel_size: 15, sigma_vox: 1.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub sigma_vox: f64,
    /// Window half-width; support is `2 * radius + 1` per axis.
    pub radius: usize,
    pub k1: f64,
    pub k2: f64,
    /// Take the dynamic range from both volumes instead of the reference only.
    pub symmetric_range: bool,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { sigma_vox: 1.5, radius: 5, k1: 0.01, k2: 0.03, symmetric_range: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_percent: f64,
    pub hfen_percent: f64,
    pub ssim: f64,
    pub mask_voxels: usize,
    pub hfen: HfenConfig,
    pub ssim_window: SsimConfig,
}

fn check(pred: &Volume, reference: &Volume, mask: &Mask) -> Result<()> {
    pred.ensure_same_dims(reference.dims())?;
    pred.ensure_same_dims(mask.dims())?;
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

fn masked_rmse(pred: &[f64], reference: &[f64], mask: &Mask) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in mask.indices() {
        num += (pred[i] - reference[i]).powi(2);
        den += reference[i].powi(2);
    }
    if den == 0.0 {
        return Err(Error::InvalidParameter("reference has zero norm inside the mask".into()));
    }
    Ok(100.0 * (num / den).sqrt())
}

/// `100 ||m (pred - ref)|| / ||m ref||`.
pub fn rmse_percent(pred: &Volume, reference: &Volume, mask: &Mask) -> Result<f64> {
    check(pred, reference, mask)?;
    masked_rmse(pred.data(), reference.data(), mask)
}

/// Zero-sum Laplacian-of-Gaussian taps as `(offset, weight)` pairs.
pub fn log_kernel_taps(cfg: &HfenConfig) -> Vec<([isize; 3], f64)> {
    let h = (cfg.kernel_size / 2) as isize;
    let s2 = cfg.sigma_vox * cfg.sigma_vox;
    let mut taps = Vec::new();
    for z in -h..=h {
        for y in -h..=h {
            for x in -h..=h {
                let r2 = (x * x + y * y + z * z) as f64;
                let v = (r2 - 3.0 * s2) / (s2 * s2) * (-r2 / (2.0 * s2)).exp();
                taps.push(([x, y, z], v));
            }
        }
    }
    let mean = taps.iter().map(|t| t.1).sum::<f64>() / taps.len() as f64;
    for t in taps.iter_mut() {
        t.1 -= mean;
    }
    taps
}

/// Taps wrapped into an unshifted grid of size `dims` and transformed.
fn log_spectrum(dims: Dims, cfg: &HfenConfig, plan: &Fft3) -> Vec<f64> {
    let mut k = vec![0.0; dims.iter().product()];
    for (o, w) in log_kernel_taps(cfg) {
        let q = [0, 1, 2].map(|a| o[a].rem_euclid(dims[a] as isize) as usize);
        k[idx(dims, q[0], q[1], q[2])] += w;
    }
    // even kernel: the spectrum is real
    plan.forward_real(&k).into_iter().map(|c| c.re).collect()
}

/// Circular LoG filtering of `v`.
pub fn log_filter(v: &Volume, cfg: &HfenConfig) -> Result<Vec<f64>> {
    let plan = Fft3::new(v.dims())?;
    let h = log_spectrum(v.dims(), cfg, &plan);
    Ok(plan.filter_real(v.data(), &h))
}

pub fn hfen_percent_with(pred: &Volume, reference: &Volume, mask: &Mask, cfg: &HfenConfig) -> Result<f64> {
    check(pred, reference, mask)?;
    let plan = Fft3::new(pred.dims())?;
    let h = log_spectrum(pred.dims(), cfg, &plan);
    let fp = plan.filter_real(pred.data(), &h);
    let fr = plan.filter_real(reference.data(), &h);
    masked_rmse(&fp, &fr, mask)
}

pub fn hfen_percent(pred: &Volume, reference: &Volume, mask: &Mask) -> Result<f64> {
    hfen_percent_with(pred, reference, mask, &HfenConfig::default())
}

fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let w: Vec<f64> = (-r..=r).map(|o| (-((o * o) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable circular convolution with the same 1D taps on every axis.
fn blur(dims: Dims, v: &[f64], taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut cur = v.to_vec();
    let mut next = vec![0.0; v.len()];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x, y, z];
                    let mut acc = 0.0;
                    for (t, &w) in taps.iter().enumerate() {
                        let mut q = p;
                        q[axis] = (p[axis] as isize + t as isize - r).rem_euclid(n) as usize;
                        acc += w * cur[idx(dims, q[0], q[1], q[2])];
                    }
                    next[idx(dims, x, y, z)] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

pub fn ssim_with(pred: &Volume, reference: &Volume, mask: &Mask, cfg: &SsimConfig) -> Result<f64> {
    check(pred, reference, mask)?;
    let dims = pred.dims();
    let m = mask.as_volume().data();
    let x: Vec<f64> = pred.data().iter().zip(m).map(|(a, b)| a * b).collect();
    let y: Vec<f64> = reference.data().iter().zip(m).map(|(a, b)| a * b).collect();

    let range =
        |v: &[f64]| mask.indices().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| (lo.min(v[i]), hi.max(v[i])));
    let (mut lo, mut hi) = range(&y);
    if cfg.symmetric_range {
        let (plo, phi) = range(&x);
        lo = lo.min(plo);
        hi = hi.max(phi);
    }
    let l = hi - lo;
    if !(l > 0.0) {
        return Err(Error::InvalidParameter("SSIM dynamic range is zero".into()));
    }
    let c1 = (cfg.k1 * l).powi(2);
    let c2 = (cfg.k2 * l).powi(2);
    let taps = gaussian_taps(cfg.sigma_vox, cfg.radius);
    let mx = blur(dims, &x, &taps);
    let my = blur(dims, &y, &taps);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mxx = blur(dims, &sq(&x, &x), &taps);
    let myy = blur(dims, &sq(&y, &y), &taps);
    let mxy = blur(dims, &sq(&x, &y), &taps);
    let mut acc = 0.0;
    for i in mask.indices() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(acc / mask.count() as f64)
}

pub fn ssim(pred: &Volume, reference: &Volume, mask: &Mask) -> Result<f64> {
    ssim_with(pred, reference, mask, &SsimConfig::default())
}

pub fn evaluate(pred: &Volume, reference: &Volume, mask: &Mask) -> Result<MetricsReport> {
    let hfen_cfg = HfenConfig::default();
    let ssim_cfg = SsimConfig::default();
    Ok(MetricsReport {
        rmse_percent: rmse_percent(pred, reference, mask)?,
        hfen_percent: hfen_percent_with(pred, reference, mask, &hfen_cfg)?,
        ssim: ssim_with(pred, reference, mask, &ssim_cfg)?,
        mask_voxels: mask.count(),
        hfen: hfen_cfg,
        ssim_window: ssim_cfg,
    })
}

/// Sample mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub method: String,
    pub n: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub hfen_mean: f64,
    pub hfen_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

impl MetricSummary {
    pub fn from_reports(method: &str, reports: &[MetricsReport]) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
        let (rmse_mean, rmse_std) = col(|r| r.rmse_percent);
        let (hfen_mean, hfen_std) = col(|r| r.hfen_percent);
        let (ssim_mean, ssim_std) = col(|r| r.ssim);
        Self {
            method: method.to_string(),
            n: reports.len(),
            rmse_mean,
            rmse_std,
            hfen_mean,
            hfen_std,
            ssim_mean,
            ssim_std,
        }
    }
}

/// Plain-text table with one column per method and rows RMSE / HFEN / SSIM.
pub fn format_table(summaries: &[MetricSummary]) -> String {
    let mut out = format!("{:<12}", "");
    for s in summaries {
        out.push_str(&format!("| {:<16}", s.method));
    }
    out.push('\n');
    let row = |label: &str, f: &dyn Fn(&MetricSummary) -> String| {
        let mut line = format!("{label:<12}");
        for s in summaries {
            line.push_str(&format!("| {:<16}", f(s)));
        }
        line.push('\n');
        line
    };
    out.push_str(&row("RMSE (%)", &|s| format!("{:.1}±{:.2}", s.rmse_mean, s.rmse_std)));
    out.push_str(&row("HFEN (%)", &|s| format!("{:.1}±{:.2}", s.hfen_mean, s.hfen_std)));
    out.push_str(&row("SSIM (0-1)", &|s| format!("{:.3}±{:.3}", s.ssim_mean, s.ssim_std)));
    out
}
