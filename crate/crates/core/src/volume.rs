//! Volumetric data model shared by every stage of the pipeline.
//!
//! Data is stored x-fastest: linear index `i = x + nx * (y + ny * z)`.
//! All numerics run in `f64`; only the on-disk format narrows to `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

/// Physical quantity carried by a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Ppm,
    Hz,
    Radians,
    Dimensionless,
}

impl Unit {
    pub fn as_str(&self) -> &'static str {
        match self {
            Unit::Ppm => "ppm",
            Unit::Hz => "hz",
            Unit::Radians => "radians",
            Unit::Dimensionless => "dimensionless",
        }
    }

    pub fn parse(s: &str) -> Result<Unit> {
        match s {
            "ppm" => Ok(Unit::Ppm),
            "hz" => Ok(Unit::Hz),
            "radians" => Ok(Unit::Radians),
            "dimensionless" => Ok(Unit::Dimensionless),
            other => Err(Error::UnknownUnit(other.to_string())),
        }
    }
}

impl std::fmt::Display for Unit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Number of voxels for `dims`, rejecting zero axes and overflow.
pub fn voxel_count(dims: Dims) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::InvalidDims(dims));
    }
    dims[0].checked_mul(dims[1]).and_then(|v| v.checked_mul(dims[2])).ok_or(Error::DimOverflow(dims))
}

#[inline(always)]
pub fn idx(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline(always)]
pub fn coords(dims: Dims, i: usize) -> (usize, usize, usize) {
    let x = i % dims[0];
    let yz = i / dims[0];
    (x, yz % dims[1], yz / dims[1])
}

fn check_voxel_size(voxel_size: [f64; 3]) -> Result<()> {
    if voxel_size.iter().all(|&d| d.is_finite() && d > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidVoxelSize(voxel_size))
    }
}

/// Unit vector along the main field, expressed in the volume frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct B0Direction([f64; 3]);

impl B0Direction {
    pub const Z: B0Direction = B0Direction([0.0, 0.0, 1.0]);

    /// Accepts only vectors whose norm is 1 within 1e-9.
    pub fn new(h: [f64; 3]) -> Result<Self> {
        let n = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
        if (n - 1.0).abs() <= 1e-9 {
            Ok(Self(h))
        } else {
            Err(Error::NonUnitB0(h))
        }
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn normalized(h: [f64; 3]) -> Result<Self> {
        let n = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::NonUnitB0(h));
        }
        Ok(Self([h[0] / n, h[1] / n, h[2] / n]))
    }

    /// Direction tilted from +z by `theta` radians towards the azimuth `phi`.
    pub fn from_angles(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Self([st * cp, st * sp, ct])
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

/// A 3D scalar field with geometry and unit metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxel_size: [f64; 3],
    unit: Unit,
    b0: Option<B0Direction>,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, voxel_size: [f64; 3], unit: Unit, data: Vec<f64>) -> Result<Self> {
        let n = voxel_count(dims)?;
        check_voxel_size(voxel_size)?;
        if data.len() != n {
            return Err(Error::DataLength { expected: n, got: data.len() });
        }
        Ok(Self { dims, voxel_size, unit, b0: None, data })
    }

    pub fn zeros(dims: Dims, voxel_size: [f64; 3], unit: Unit) -> Result<Self> {
        let n = voxel_count(dims)?;
        Self::new(dims, voxel_size, unit, vec![0.0; n])
    }

    pub fn from_fn(
        dims: Dims,
        voxel_size: [f64; 3],
        unit: Unit,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let n = voxel_count(dims)?;
        let mut data = Vec::with_capacity(n);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, voxel_size, unit, data)
    }

    pub fn with_b0(mut self, b0: Option<B0Direction>) -> Self {
        self.b0 = b0;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }
    pub fn unit(&self) -> Unit {
        self.unit
    }
    pub fn b0(&self) -> Option<B0Direction> {
        self.b0
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[idx(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = idx(self.dims, x, y, z);
        self.data[i] = v;
    }

    /// Same geometry, new data and unit.
    pub fn with_data(&self, unit: Unit, data: Vec<f64>) -> Result<Self> {
        Ok(Self::new(self.dims, self.voxel_size, unit, data)?.with_b0(self.b0))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn set_unit(&mut self, unit: Unit) {
        self.unit = unit;
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(i) => Err(Error::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn ensure_same_dims(&self, other_dims: Dims) -> Result<()> {
        if self.dims == other_dims {
            Ok(())
        } else {
            Err(Error::DimMismatch(self.dims, other_dims))
        }
    }

    fn ensure_compatible(&self, other: &Volume) -> Result<()> {
        self.ensure_same_dims(other.dims)?;
        if self.unit != other.unit {
            return Err(Error::UnitMismatch(self.unit.to_string(), other.unit.to_string()));
        }
        Ok(())
    }

    pub fn checked_add(&self, other: &Volume) -> Result<Volume> {
        self.ensure_compatible(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { data, ..self.clone() })
    }

    pub fn checked_sub(&self, other: &Volume) -> Result<Volume> {
        self.ensure_compatible(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { data, ..self.clone() })
    }

    pub fn scaled(&self, c: f64) -> Volume {
        self.map(|v| c * v)
    }

    /// Voxelwise product with a mask; unit is preserved.
    pub fn masked(&self, mask: &Mask) -> Result<Volume> {
        self.ensure_same_dims(mask.dims())?;
        let data = self.data.iter().zip(mask.as_volume().data()).map(|(v, m)| v * m).collect();
        Ok(Self { data, ..self.clone() })
    }

    pub fn dot(&self, other: &Volume) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// A binary, dimensionless volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Volume);

impl Mask {
    pub fn from_volume(vol: Volume) -> Result<Self> {
        if let Some(i) = vol.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryMask(i));
        }
        let mut vol = vol;
        vol.unit = Unit::Dimensionless;
        Ok(Self(vol))
    }

    /// Like [`Mask::from_volume`] but also rejects an empty mask.
    pub fn brain(vol: Volume) -> Result<Self> {
        let m = Self::from_volume(vol)?;
        if m.count() == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(m)
    }

    pub fn from_fn(dims: Dims, voxel_size: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let vol = Volume::from_fn(dims, voxel_size, Unit::Dimensionless, |x, y, z| if f(x, y, z) { 1.0 } else { 0.0 })?;
        Ok(Self(vol))
    }

    pub fn full(dims: Dims, voxel_size: [f64; 3]) -> Result<Self> {
        Self::from_fn(dims, voxel_size, |_, _, _| true)
    }

    pub fn from_bools(dims: Dims, voxel_size: [f64; 3], bits: &[bool]) -> Result<Self> {
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self(Volume::new(dims, voxel_size, Unit::Dimensionless, data)?))
    }

    pub fn dims(&self) -> Dims {
        self.0.dims
    }
    pub fn voxel_size(&self) -> [f64; 3] {
        self.0.voxel_size
    }
    pub fn as_volume(&self) -> &Volume {
        &self.0
    }
    pub fn into_volume(self) -> Volume {
        self.0
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        self.0.data[i] != 0.0
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.data.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.0.data.iter().map(|&v| v != 0.0).collect()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.0.data.iter().zip(&other.0.data).all(|(&a, &b)| a == 0.0 || b != 0.0)
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.0.ensure_same_dims(other.dims())?;
        let data = self.0.data.iter().zip(&other.0.data).map(|(a, b)| a * b).collect();
        Ok(Self(Volume { data, ..self.0.clone() }))
    }
}

/// Discrete spatial frequencies in cycles/mm, unshifted FFT layout.
#[derive(Clone, Debug, PartialEq)]
pub struct KGrid {
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
    pub kz: Vec<f64>,
}

/// `numpy.fft.fftfreq(n, d)`.
pub fn fftfreq(n: usize, d: f64) -> Vec<f64> {
    let nf = n as f64;
    (0..n)
        .map(|i| {
            let m = if i < n.div_ceil(2) { i as f64 } else { i as f64 - nf };
            m / (nf * d)
        })
        .collect()
}

impl KGrid {
    pub fn new(dims: Dims, voxel_size: [f64; 3]) -> Result<Self> {
        voxel_count(dims)?;
        check_voxel_size(voxel_size)?;
        Ok(Self {
            kx: fftfreq(dims[0], voxel_size[0]),
            ky: fftfreq(dims[1], voxel_size[1]),
            kz: fftfreq(dims[2], voxel_size[2]),
        })
    }

    pub fn dims(&self) -> Dims {
        [self.kx.len(), self.ky.len(), self.kz.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(matches!(Volume::zeros([0, 4, 4], [1.0; 3], Unit::Ppm), Err(Error::InvalidDims(_))));
        assert!(matches!(Volume::zeros([2, 2, 2], [1.0, 0.0, 1.0], Unit::Ppm), Err(Error::InvalidVoxelSize(_))));
        assert!(matches!(Volume::new([2, 2, 2], [1.0; 3], Unit::Ppm, vec![0.0; 7]), Err(Error::DataLength { .. })));
        assert!(matches!(voxel_count([usize::MAX, 2, 1]), Err(Error::DimOverflow(_))));
    }

    #[test]
    fn mixed_unit_arithmetic_rejected() {
        let a = Volume::zeros([2, 2, 2], [1.0; 3], Unit::Ppm).unwrap();
        let b = Volume::zeros([2, 2, 2], [1.0; 3], Unit::Hz).unwrap();
        assert!(matches!(a.checked_add(&b), Err(Error::UnitMismatch(..))));
        let c = a.checked_add(&a.scaled(2.0)).unwrap();
        assert_eq!(c.unit(), Unit::Ppm);
    }

    #[test]
    fn mask_must_be_binary() {
        let v = Volume::new([2, 1, 1], [1.0; 3], Unit::Dimensionless, vec![1.0, 0.5]).unwrap();
        assert!(matches!(Mask::from_volume(v), Err(Error::NonBinaryMask(1))));
        let empty = Volume::zeros([2, 1, 1], [1.0; 3], Unit::Dimensionless).unwrap();
        assert!(matches!(Mask::brain(empty), Err(Error::EmptyMask)));
    }

    #[test]
    fn b0_must_be_unit() {
        assert!(B0Direction::new([0.0, 0.0, 1.0]).is_ok());
        assert!(B0Direction::new([0.0, 0.0, 1.0 + 1e-8]).is_err());
        let h = B0Direction::normalized([1.0, 1.0, 0.0]).unwrap().as_array();
        assert!((h[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn kgrid_layout_and_pairing() {
        for n in 1..=9 {
            let k = fftfreq(n, 0.5);
            assert_eq!(k[0], 0.0);
            for i in 1..n {
                if n % 2 == 0 && i == n / 2 {
                    assert!((k[i] + 1.0).abs() < 1e-15, "lone Nyquist bin is -1/(2d)");
                    continue;
                }
                assert_eq!(k[n - i], -k[i]);
            }
        }
        assert_eq!(fftfreq(4, 1.0), vec![0.0, 0.25, -0.5, -0.25]);
        assert_eq!(fftfreq(5, 1.0), vec![0.0, 0.2, 0.4, -0.4, -0.2]);
    }

    #[test]
    fn index_roundtrip() {
        let d = [3, 4, 5];
        for i in 0..60 {
            let (x, y, z) = coords(d, i);
            assert_eq!(idx(d, x, y, z), i);
        }
    }
}
