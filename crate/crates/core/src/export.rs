//! 8-bit slice export as binary PGM (P5).
//!
//! Pixel value `floor(255 (v - lo) / (hi - lo) + 0.5)`, clamped to `[0, 255]`
//! (round half up, so 0.5 in a `[0, 1]` window maps to 128).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::volume::{idx, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    X,
    Y,
    Z,
}

impl SliceAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x" | "sagittal" => Ok(Self::X),
            "y" | "coronal" => Ok(Self::Y),
            "z" | "axial" => Ok(Self::Z),
            _ => Err(Error::InvalidParameter(format!("unknown slice axis {s:?}"))),
        }
    }

    fn number(self) -> usize {
        match self {
            Self::X => 0,
            Self::Y => 1,
            Self::Z => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn window_pixel(v: f64, lo: f64, hi: f64) -> u8 {
    let t = 255.0 * (v - lo) / (hi - lo);
    (t + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Slice `index` along `axis`. Columns run along the lower remaining axis,
/// rows along the higher one (axial slices: x across, y down).
pub fn extract_slice(vol: &Volume, axis: SliceAxis, index: usize, window: [f64; 2]) -> Result<GrayImage> {
    let [lo, hi] = window;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidParameter(format!("window [{lo}, {hi}] must be finite with lo < hi")));
    }
    let dims = vol.dims();
    let a = axis.number();
    if index >= dims[a] {
        return Err(Error::IndexOutOfRange { index, len: dims[a] });
    }
    vol.ensure_finite()?;
    let (u, v) = match a {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (width, height) = (dims[u], dims[v]);
    let mut pixels = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let mut p = [0usize; 3];
            p[a] = index;
            p[u] = col;
            p[v] = row;
            pixels.push(window_pixel(vol.data()[idx(dims, p[0], p[1], p[2])], lo, hi));
        }
    }
    Ok(GrayImage { width, height, pixels })
}

pub fn export_slice(vol: &Volume, axis: SliceAxis, index: usize, window: [f64; 2], path: &Path) -> Result<GrayImage> {
    let img = extract_slice(vol, axis, index, window)?;
    write_atomic(path, &img.to_pgm())?;
    Ok(img)
}
