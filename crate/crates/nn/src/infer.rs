//! Whole-volume inference. Dims that are not multiples of `2^depth` are
//! reflect-padded (mirror without repeating the edge voxel), split evenly
//! before and after, and the prediction is cropped back.

use qsm_core::{Dims, Mask, Unit, Volume};

use crate::error::Result;
use crate::net::Net;
use crate::tensor::Tensor;

/// Mirror index into `[0, n)` for any integer position.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Padded dims and the leading pad per axis.
pub fn padded_layout(dims: Dims, multiple: usize) -> (Dims, [usize; 3]) {
    let padded = dims.map(|d| d.div_ceil(multiple).max(1) * multiple);
    let before = [0, 1, 2].map(|a| (padded[a] - dims[a]) / 2);
    (padded, before)
}

fn reflect_pad(data: &[f64], dims: Dims, padded: Dims, before: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(padded.iter().product());
    for z in 0..padded[2] {
        let sz = reflect_index(z as isize - before[2] as isize, dims[2]);
        for y in 0..padded[1] {
            let sy = reflect_index(y as isize - before[1] as isize, dims[1]);
            for x in 0..padded[0] {
                let sx = reflect_index(x as isize - before[0] as isize, dims[0]);
                out.push(data[sx + dims[0] * (sy + dims[1] * sz)]);
            }
        }
    }
    out
}

/// Susceptibility estimate in ppm, zero outside `mask`.
pub fn infer(net: &Net, field: &Volume, mask: &Mask) -> Result<Volume> {
    field.ensure_same_dims(mask.dims())?;
    field.ensure_finite()?;
    let dims = field.dims();
    let (padded, before) = padded_layout(dims, net.config.multiple());
    let f = reflect_pad(field.data(), dims, padded, before);
    let m = reflect_pad(mask.as_volume().data(), dims, padded, before);
    let mut data = f;
    data.extend(m);
    let input = Tensor::new(vec![1, 2, padded[2], padded[1], padded[0]], data)?;
    let out = net.predict(input)?;
    let mut chi = Vec::with_capacity(field.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let row = padded[0] * (y + before[1] + padded[1] * (z + before[2]));
            chi.extend_from_slice(&out.data()[row + before[0]..row + before[0] + dims[0]]);
        }
    }
    Ok(field.with_data(Unit::Ppm, chi)?.masked(mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn layout() {
        assert_eq!(padded_layout([20, 16, 33], 16), ([32, 16, 48], [6, 0, 7]));
    }
}
