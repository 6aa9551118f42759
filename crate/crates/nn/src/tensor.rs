//! Dense f64 tensors. Feature maps are `(batch, channels, z, y, x)` with x
//! fastest, so one channel of one sample has the memory layout of a
//! `qsm_core::Volume`.

use qsm_core::{Mask, Volume};

use crate::error::{NnError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// `(batch, channels, [z, y, x])` of a rank-5 feature map.
    pub fn dims5(&self) -> Result<(usize, usize, [usize; 3])> {
        match self.shape[..] {
            [b, c, z, y, x] => Ok((b, c, [z, y, x])),
            _ => Err(NnError::Shape(format!("expected (b, c, z, y, x), got {:?}", self.shape))),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks same-shaped volumes as channels of one sample.
    pub fn from_channels(vols: &[&Volume]) -> Result<Self> {
        let first = vols.first().ok_or_else(|| NnError::Shape("no channels".into()))?;
        let [nx, ny, nz] = first.dims();
        let mut data = Vec::with_capacity(first.len() * vols.len());
        for v in vols {
            v.ensure_same_dims(first.dims())?;
            data.extend_from_slice(v.data());
        }
        Ok(Self { shape: vec![1, vols.len(), nz, ny, nx], data })
    }

    /// Network input for one sample: channels (field, mask).
    pub fn from_field_mask(field: &Volume, mask: &Mask) -> Result<Self> {
        Self::from_channels(&[field, mask.as_volume()])
    }

    /// Concatenates samples along the batch axis.
    pub fn stack(samples: &[Tensor]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| NnError::Shape("empty batch".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * samples.len());
        for s in samples {
            if s.shape != first.shape {
                return Err(NnError::Shape(format!("batch shapes {:?} vs {:?}", s.shape, first.shape)));
            }
            data.extend_from_slice(&s.data);
        }
        shape[0] *= samples.len();
        Ok(Self { shape, data })
    }

    /// Channel `c` of sample `b` as a slice.
    pub fn channel(&self, b: usize, c: usize) -> &[f64] {
        let n: usize = self.shape[2..].iter().product();
        let ch = self.shape[1];
        &self.data[(b * ch + c) * n..][..n]
    }
}
