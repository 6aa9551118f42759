//! Synthetic training/evaluation data: a tissue-like susceptibility base is
//! elastically warped, overwritten with random geometric inclusions, given a
//! smooth local contrast change, masked, and pushed through the dipole
//! forward model.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dipole::{build_dipole_kernel, forward_field};
use crate::error::{Error, Result};
use crate::volume::{idx, voxel_count, B0Direction, Dims, Mask, Unit, Volume};

const PLACEMENT_RETRIES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipsoid,
    Sphere,
    Cuboid,
    Cylinder,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Ellipsoid, ShapeKind::Sphere, ShapeKind::Cuboid, ShapeKind::Cylinder];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub grid_spacing_vox: usize,
    pub max_displacement_vox: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        Self { grid_spacing_vox: 8, max_displacement_vox: 4.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastParams {
    pub n_blobs: usize,
    pub gain_range: [f64; 2],
}

impl Default for ContrastParams {
    fn default() -> Self {
        Self { n_blobs: 3, gain_range: [0.6, 1.4] }
    }
}

/// Everything needed to regenerate one phantom bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub voxel_size_mm: [f64; 3],
    pub seed: u64,
    pub n_shapes: usize,
    pub shape_kinds: Vec<ShapeKind>,
    pub susceptibility_range_ppm: [f64; 2],
    /// Range for radii / semi-axes / half-edges, in voxels.
    pub shape_size_vox: [f64; 2],
    pub elastic: ElasticParams,
    pub contrast: ContrastParams,
    pub b0: B0Direction,
    /// Seed susceptibility map; the procedural base is used when absent.
    #[serde(skip)]
    pub base: Option<Volume>,
}

impl PhantomSpec {
    pub fn new(dims: Dims, seed: u64) -> Self {
        let min_dim = dims.iter().copied().min().unwrap_or(1) as f64;
        Self {
            dims,
            voxel_size_mm: [1.0; 3],
            seed,
            n_shapes: 6,
            shape_kinds: ShapeKind::ALL.to_vec(),
            susceptibility_range_ppm: [-1.0, 1.0],
            shape_size_vox: [1.5, (min_dim / 8.0).max(2.0)],
            elastic: ElasticParams::default(),
            contrast: ContrastParams::default(),
            b0: B0Direction::Z,
            base: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        voxel_count(self.dims)?;
        let [lo, hi] = self.susceptibility_range_ppm;
        if !(lo < hi) {
            return Err(Error::InvalidParameter(format!("susceptibility range [{lo}, {hi}]")));
        }
        if !(self.elastic.max_displacement_vox >= 0.0) {
            return Err(Error::InvalidParameter("max_displacement_vox must be >= 0".into()));
        }
        if self.elastic.grid_spacing_vox < 2 {
            return Err(Error::InvalidParameter("grid_spacing_vox must be >= 2".into()));
        }
        let [g0, g1] = self.contrast.gain_range;
        if !(g0 > 0.0 && g0 <= g1 && g1.is_finite()) {
            return Err(Error::InvalidParameter(format!("gain range [{g0}, {g1}]")));
        }
        let [s0, s1] = self.shape_size_vox;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::InvalidParameter(format!("shape size range [{s0}, {s1}]")));
        }
        if self.n_shapes > 0 && self.shape_kinds.is_empty() {
            return Err(Error::InvalidParameter("no shape kinds enabled".into()));
        }
        if let Some(b) = &self.base {
            b.ensure_same_dims(self.dims)?;
        }
        Ok(())
    }

    /// Phantom specs for a batch: item `i` gets an independent stream of `master_seed`.
    pub fn batch(&self, master_seed: u64, count: usize) -> Vec<PhantomSpec> {
        (0..count)
            .map(|i| {
                let mut s = self.clone();
                s.seed = derive_seed(master_seed, i as u64);
                s
            })
            .collect()
    }
}

/// Seed for item `index` of a batch, independent of generation order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub chi_true: Volume,
    pub local_field: Volume,
    pub mask: Mask,
    pub b0: B0Direction,
    pub spec: PhantomSpec,
}

impl PhantomPair {
    /// Re-simulates the field from `chi_true` and checks the stored invariants.
    pub fn verify(&self) -> Result<f64> {
        let kernel = build_dipole_kernel(self.chi_true.dims(), self.chi_true.voxel_size(), self.b0)?;
        let again = forward_field(&self.chi_true, &kernel, true)?;
        let err = again.data().iter().zip(self.local_field.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if err > 1e-10 {
            return Err(Error::InvalidParameter(format!("field re-simulation differs by {err:.3e}")));
        }
        if let Some(i) = (0..self.chi_true.len()).find(|&i| !self.mask.contains(i) && self.chi_true.data()[i] != 0.0) {
            return Err(Error::InvalidParameter(format!("chi nonzero outside mask at voxel {i}")));
        }
        Ok(err)
    }
}

/// Voxel sampling with trilinear weights; positions outside the grid read 0.
fn sample_trilinear(vol: &Volume, p: [f64; 3]) -> f64 {
    let d = vol.dims();
    let data = vol.data();
    let mut base = [0isize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let f = p[a].floor();
        base[a] = f as isize;
        frac[a] = p[a] - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut q = [0isize; 3];
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            q[a] = base[a] + bit as isize;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        if (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < d[a]) {
            acc += w * data[idx(d, q[0] as usize, q[1] as usize, q[2] as usize)];
        }
    }
    acc
}

/// Random smooth displacement field defined on a coarse control grid.
#[derive(Clone, Debug)]
pub struct ElasticWarp {
    dims: Dims,
    spacing: usize,
    ctrl: Dims,
    // [component][control point], control points x-fastest
    disp: [Vec<f64>; 3],
}

impl ElasticWarp {
    pub fn random(dims: Dims, grid_spacing_vox: usize, max_displacement_vox: f64, seed: u64) -> Result<Self> {
        voxel_count(dims)?;
        if grid_spacing_vox < 2 || !(max_displacement_vox >= 0.0) {
            return Err(Error::InvalidParameter("elastic: spacing >= 2 and displacement >= 0 required".into()));
        }
        let ctrl = dims.map(|n| (n.saturating_sub(1)).div_ceil(grid_spacing_vox) + 1);
        let m = ctrl.iter().product::<usize>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> {
            (0..m)
                .map(|_| {
                    if max_displacement_vox == 0.0 {
                        0.0
                    } else {
                        rng.gen_range(-max_displacement_vox..=max_displacement_vox)
                    }
                })
                .collect()
        };
        let disp = [draw(), draw(), draw()];
        Ok(Self { dims, spacing: grid_spacing_vox, ctrl, disp })
    }

    fn displacement(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let s = self.spacing as f64;
        let p = [x as f64 / s, y as f64 / s, z as f64 / s];
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let f = p[a].floor() as usize;
            let f = f.min(self.ctrl[a] - 1);
            base[a] = f;
            frac[a] = p[a] - f as f64;
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let mut w = 1.0;
            let mut q = [0usize; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                q[a] = (base[a] + bit).min(self.ctrl[a] - 1);
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            let ci = idx(self.ctrl, q[0], q[1], q[2]);
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.disp[c][ci];
            }
        }
        out
    }

    pub fn apply(&self, vol: &Volume) -> Result<Volume> {
        vol.ensure_same_dims(self.dims)?;
        let d = self.dims;
        let mut data = Vec::with_capacity(vol.len());
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let u = self.displacement(x, y, z);
                    data.push(sample_trilinear(vol, [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]]));
                }
            }
        }
        vol.with_data(vol.unit(), data)
    }
}

pub fn elastic_transform(
    vol: &Volume,
    grid_spacing_vox: usize,
    max_displacement_vox: f64,
    seed: u64,
) -> Result<Volume> {
    ElasticWarp::random(vol.dims(), grid_spacing_vox, max_displacement_vox, seed)?.apply(vol)
}

/// One solid inclusion in voxel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: [f64; 3],
    /// Semi-axes (ellipsoid), radius (sphere, all equal), half-edges (cuboid),
    /// or (radius, radius, half-height) for a cylinder.
    pub half_extents: [f64; 3],
    /// Rows map volume-frame offsets into the shape frame.
    pub rotation: [[f64; 3]; 3],
    pub value: f64,
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Shape {
    pub fn sphere(center: [f64; 3], radius: f64, value: f64) -> Self {
        Self { kind: ShapeKind::Sphere, center, half_extents: [radius; 3], rotation: IDENTITY, value }
    }

    pub fn bounding_radius(&self) -> f64 {
        let [a, b, c] = self.half_extents;
        match self.kind {
            ShapeKind::Sphere => a,
            ShapeKind::Ellipsoid => a.max(b).max(c),
            ShapeKind::Cuboid => (a * a + b * b + c * c).sqrt(),
            ShapeKind::Cylinder => (a * a + c * c).sqrt(),
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let r = &self.rotation;
        let q = [0, 1, 2].map(|i| r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2]);
        let [a, b, c] = self.half_extents;
        match self.kind {
            ShapeKind::Sphere => q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= a * a,
            ShapeKind::Ellipsoid => (q[0] / a).powi(2) + (q[1] / b).powi(2) + (q[2] / c).powi(2) <= 1.0,
            ShapeKind::Cuboid => q[0].abs() <= a && q[1].abs() <= b && q[2].abs() <= c,
            ShapeKind::Cylinder => q[0] * q[0] + q[1] * q[1] <= a * a && q[2].abs() <= c,
        }
    }

    /// Overwrites every voxel inside the shape; returns the number set.
    pub fn rasterize(&self, vol: &mut Volume) -> usize {
        let d = vol.dims();
        let r = self.bounding_radius();
        let lo = |a: usize| ((self.center[a] - r).floor().max(0.0)) as usize;
        let hi = |a: usize| ((self.center[a] + r).ceil().max(0.0) as usize).min(d[a] - 1);
        let mut n = 0;
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    if self.contains([x as f64, y as f64, z as f64]) {
                        vol.set(x, y, z, self.value);
                        n += 1;
                    }
                }
            }
        }
        n
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // uniform unit quaternion (Shoemake)
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin(), b * (tau * u3).cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Draws one shape that fits inside `dims`, redrawing up to a retry cap.
pub fn draw_shape(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Shape> {
    let d = spec.dims;
    let [s0, s1] = spec.shape_size_vox;
    let [lo, hi] = spec.susceptibility_range_ppm;
    for _ in 0..PLACEMENT_RETRIES {
        let kind = spec.shape_kinds[rng.gen_range(0..spec.shape_kinds.len())];
        let mut size = || if s0 == s1 { s0 } else { rng.gen_range(s0..=s1) };
        let half_extents = match kind {
            ShapeKind::Sphere => {
                let r = size();
                [r; 3]
            }
            ShapeKind::Cylinder => {
                let r = size();
                [r, r, size()]
            }
            _ => [size(), size(), size()],
        };
        let rotation = random_rotation(rng);
        let value = rng.gen_range(lo..=hi);
        let mut shape = Shape { kind, center: [0.0; 3], half_extents, rotation, value };
        let ext = shape.bounding_radius();
        if (0..3).any(|a| 2.0 * ext > (d[a] - 1) as f64) {
            continue;
        }
        for (a, &n) in d.iter().enumerate() {
            let span = (n - 1) as f64 - ext;
            shape.center[a] = if span > ext { rng.gen_range(ext..=span) } else { ext };
        }
        return Ok(shape);
    }
    Err(Error::ShapePlacement(PLACEMENT_RETRIES))
}

pub fn insert_random_shapes(chi: &Volume, spec: &PhantomSpec, seed: u64) -> Result<Volume> {
    chi.ensure_same_dims(spec.dims)?;
    let mut out = chi.clone();
    if spec.n_shapes == 0 {
        return Ok(out);
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..spec.n_shapes {
        draw_shape(spec, &mut rng)?.rasterize(&mut out);
    }
    Ok(out)
}

/// Smooth positive gain field. Where blobs overlap the weights are
/// renormalized so the gain stays between 1 and the blob gains.
pub fn contrast_gain_field(dims: Dims, n_blobs: usize, gain_range: [f64; 2], seed: u64) -> Result<Vec<f64>> {
    let n = voxel_count(dims)?;
    let [g0, g1] = gain_range;
    if !(g0 > 0.0 && g0 <= g1 && g1.is_finite()) {
        return Err(Error::InvalidParameter(format!("gain range [{g0}, {g1}] must lie in (0, inf)")));
    }
    if n_blobs == 0 {
        return Ok(vec![1.0; n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dim = dims.iter().copied().min().unwrap() as f64;
    let blobs: Vec<([f64; 3], f64, f64)> = (0..n_blobs)
        .map(|_| {
            let c = [0, 1, 2].map(|a| rng.gen_range(0.0..dims[a] as f64));
            let sigma = rng.gen_range(min_dim / 8.0..=min_dim / 4.0).max(0.5);
            let gain = if g0 == g1 { g0 } else { rng.gen_range(g0..=g1) };
            (c, sigma, gain)
        })
        .collect();
    let mut g = Vec::with_capacity(n);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let mut wsum = 0.0;
                let mut acc = 0.0;
                for (c, sigma, gain) in &blobs {
                    let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                    let e = (-r2 / (2.0 * sigma * sigma)).exp();
                    wsum += e;
                    acc += (gain - 1.0) * e;
                }
                g.push(1.0 + acc / wsum.max(1.0));
            }
        }
    }
    Ok(g)
}

pub fn local_contrast_change(chi: &Volume, n_blobs: usize, gain_range: [f64; 2], seed: u64) -> Result<Volume> {
    let g = contrast_gain_field(chi.dims(), n_blobs, gain_range, seed)?;
    let data = chi.data().iter().zip(&g).map(|(v, g)| v * g).collect();
    chi.with_data(chi.unit(), data)
}

/// Ellipsoidal "brain" with smooth Gaussian tissue texture of amplitude up to 0.2 ppm.
fn procedural_base(spec: &PhantomSpec, seed: u64) -> Result<(Volume, Volume)> {
    let d = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = d.map(|n| (n as f64 - 1.0) / 2.0);
    let semi = [0.36 * d[0] as f64, 0.40 * d[1] as f64, 0.34 * d[2] as f64].map(|s| s.max(0.5));
    let inside = |x: usize, y: usize, z: usize| {
        let p = [x as f64, y as f64, z as f64];
        (0..3).map(|a| ((p[a] - c[a]) / semi[a]).powi(2)).sum::<f64>() <= 1.0
    };
    let indicator =
        Volume::from_fn(d, spec.voxel_size_mm, Unit::Dimensionless, |x, y, z| if inside(x, y, z) { 1.0 } else { 0.0 })?;
    let min_dim = d.iter().copied().min().unwrap() as f64;
    let blobs: Vec<([f64; 3], f64, f64)> = (0..12)
        .map(|_| {
            let center = [0, 1, 2].map(|a| c[a] + rng.gen_range(-semi[a]..=semi[a]) * 0.8);
            let sigma = rng.gen_range(min_dim / 16.0..=min_dim / 6.0).max(0.5);
            let amp = rng.gen_range(-0.2..=0.2);
            (center, sigma, amp)
        })
        .collect();
    let base = Volume::from_fn(d, spec.voxel_size_mm, Unit::Ppm, |x, y, z| {
        if !inside(x, y, z) {
            return 0.0;
        }
        let p = [x as f64, y as f64, z as f64];
        let v: f64 = blobs
            .iter()
            .map(|(cb, s, amp)| {
                let r2: f64 = (0..3).map(|a| (p[a] - cb[a]).powi(2)).sum();
                amp * (-r2 / (2.0 * s * s)).exp()
            })
            .sum();
        v.clamp(-0.2, 0.2)
    })?;
    Ok((base, indicator))
}

/// Full pipeline for one phantom.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let base_seed = master.next_u64();
    let elastic_seed = master.next_u64();
    let shape_seed = master.next_u64();
    let contrast_seed = master.next_u64();

    let (base, indicator) = match &spec.base {
        Some(b) => {
            let mut b = b.clone();
            b.set_unit(Unit::Ppm);
            let ind = b.map(|v| if v != 0.0 { 1.0 } else { 0.0 });
            (b, ind)
        }
        None => procedural_base(spec, base_seed)?,
    };
    let warp =
        ElasticWarp::random(spec.dims, spec.elastic.grid_spacing_vox, spec.elastic.max_displacement_vox, elastic_seed)?;
    let chi = warp.apply(&base)?;
    let warped_ind = warp.apply(&indicator)?;
    let bits: Vec<bool> = warped_ind.data().iter().map(|&v| v >= 0.5).collect();
    let mask = Mask::from_bools(spec.dims, spec.voxel_size_mm, &bits)?;
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }

    let chi = insert_random_shapes(&chi, spec, shape_seed)?;
    let chi = local_contrast_change(&chi, spec.contrast.n_blobs, spec.contrast.gain_range, contrast_seed)?;
    let mut chi_true = chi.masked(&mask)?;
    chi_true.set_unit(Unit::Ppm);
    let chi_true = chi_true.with_b0(Some(spec.b0));

    let kernel = build_dipole_kernel(spec.dims, spec.voxel_size_mm, spec.b0)?;
    let local_field = forward_field(&chi_true, &kernel, true)?;
    Ok(PhantomPair { chi_true, local_field, mask, b0: spec.b0, spec: spec.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(d: Dims) -> Volume {
        Volume::from_fn(d, [1.0; 3], Unit::Ppm, |x, y, z| (x as f64 * 0.3 - y as f64 * 0.2 + z as f64 * 0.1).sin())
            .unwrap()
    }

    #[test]
    fn zero_displacement_is_identity() {
        let v = ramp([12, 10, 9]);
        let out = elastic_transform(&v, 4, 0.0, 3).unwrap();
        let err = out.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12);
    }

    #[test]
    fn constant_interior_preserved() {
        let d = [24, 24, 24];
        let v = Volume::from_fn(d, [1.0; 3], Unit::Ppm, |_, _, _| 0.7).unwrap();
        let out = elastic_transform(&v, 8, 3.0, 11).unwrap();
        for z in 3..21 {
            for y in 3..21 {
                for x in 3..21 {
                    assert!((out.get(x, y, z) - 0.7).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn warp_output_within_convex_hull() {
        let v = ramp([16, 16, 16]);
        let out = elastic_transform(&v, 4, 5.0, 2).unwrap();
        let lo = v.data().iter().copied().fold(0.0, f64::min);
        let hi = v.data().iter().copied().fold(0.0, f64::max);
        assert!(out.data().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
        assert_eq!(out, elastic_transform(&v, 4, 5.0, 2).unwrap());
        assert_ne!(out, elastic_transform(&v, 4, 5.0, 3).unwrap());
    }

    #[test]
    fn centred_sphere_matches_membership_scan() {
        let d = [32, 32, 32];
        let mut v = Volume::zeros(d, [1.0; 3], Unit::Ppm).unwrap();
        let c = [16.0, 16.0, 16.0];
        let n = Shape::sphere(c, 5.0, 0.5).rasterize(&mut v);
        let mut brute = 0;
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let r2 = (x as f64 - 16.0).powi(2) + (y as f64 - 16.0).powi(2) + (z as f64 - 16.0).powi(2);
                    if r2 <= 25.0 {
                        brute += 1;
                    }
                }
            }
        }
        assert_eq!(n, brute);
        assert_eq!(v.data().iter().filter(|&&x| x == 0.5).count(), brute);
    }

    #[test]
    fn rotated_shapes_are_rigid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_rotation(&mut rng);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_insertion_determinism_and_identity() {
        let d = [24, 24, 24];
        let v = Volume::zeros(d, [1.0; 3], Unit::Ppm).unwrap();
        let mut spec = PhantomSpec::new(d, 0);
        spec.n_shapes = 0;
        assert_eq!(insert_random_shapes(&v, &spec, 1).unwrap(), v);
        spec.n_shapes = 5;
        let a = insert_random_shapes(&v, &spec, 1).unwrap();
        assert_eq!(a, insert_random_shapes(&v, &spec, 1).unwrap());
        assert!(a.data().iter().any(|&x| x != 0.0));
        let [lo, hi] = spec.susceptibility_range_ppm;
        assert!(a.data().iter().all(|&x| x == 0.0 || (lo..=hi).contains(&x)));
    }

    #[test]
    fn oversized_shapes_rejected() {
        let d = [16, 16, 16];
        let mut spec = PhantomSpec::new(d, 0);
        spec.shape_size_vox = [9.0, 12.0];
        let v = Volume::zeros(d, [1.0; 3], Unit::Ppm).unwrap();
        assert!(matches!(insert_random_shapes(&v, &spec, 4), Err(Error::ShapePlacement(_))));
    }

    #[test]
    fn contrast_change_properties() {
        let v = ramp([16, 16, 16]);
        assert_eq!(local_contrast_change(&v, 0, [0.5, 1.5], 1).unwrap(), v);
        let z = Volume::zeros([16, 16, 16], [1.0; 3], Unit::Ppm).unwrap();
        assert!(local_contrast_change(&z, 4, [0.5, 1.5], 1).unwrap().data().iter().all(|&x| x == 0.0));
        // many heavily overlapping low-gain blobs: gain must stay positive
        let g = contrast_gain_field([16, 16, 16], 30, [0.05, 0.2], 8).unwrap();
        let gmin = g.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(gmin >= 0.05 - 1e-12);
        let out = local_contrast_change(&v, 30, [0.05, 0.2], 8).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert_eq!(a.signum() * (a.abs() > 0.0) as i32 as f64, b.signum() * (b.abs() > 0.0) as i32 as f64);
        }
        assert!(contrast_gain_field([4, 4, 4], 1, [0.0, 1.0], 0).is_err());
    }

    #[test]
    fn phantom_pipeline_invariants() {
        let spec = PhantomSpec::new([32, 32, 32], 17);
        let p = generate_phantom(&spec).unwrap();
        p.verify().unwrap();
        assert_eq!(p, generate_phantom(&spec).unwrap());
        let other = generate_phantom(&PhantomSpec { seed: 18, ..spec.clone() }).unwrap();
        assert_ne!(other.chi_true, p.chi_true);
        let max_gain = spec.contrast.gain_range[1];
        let [lo, hi] = spec.susceptibility_range_ppm;
        assert!(p.chi_true.data().iter().all(|&v| v >= lo * max_gain - 1e-12 && v <= hi * max_gain + 1e-12));
        assert!(p.mask.count() > 1000);
    }

    #[test]
    fn batch_seeds_are_order_independent() {
        let spec = PhantomSpec::new([8, 8, 8], 0);
        let a = spec.batch(7, 4);
        let b = spec.batch(7, 2);
        assert_eq!(a[0].seed, b[0].seed);
        assert_eq!(a[1].seed, b[1].seed);
        assert_ne!(a[0].seed, a[1].seed);
    }

    #[test]
    fn supplied_base_is_used() {
        let d = [16, 16, 16];
        let base = Volume::from_fn(d, [1.0; 3], Unit::Ppm, |x, y, z| {
            if (4..12).contains(&x) && (4..12).contains(&y) && (4..12).contains(&z) {
                0.1
            } else {
                0.0
            }
        })
        .unwrap();
        let mut spec = PhantomSpec::new(d, 3);
        spec.n_shapes = 0;
        spec.elastic.max_displacement_vox = 0.0;
        spec.contrast.n_blobs = 0;
        spec.base = Some(base.clone());
        let p = generate_phantom(&spec).unwrap();
        assert_eq!(p.chi_true.data(), base.data());
        p.verify().unwrap();
    }
}
