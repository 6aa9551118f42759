//! Spherical neighborhoods and mask erosion.

use crate::error::{Error, Result};
use crate::volume::{coords, idx, Mask};

/// Integer offsets whose physical length is at most `radius_mm`.
pub fn sphere_offsets(radius_mm: f64, voxel_size: [f64; 3]) -> Vec<[isize; 3]> {
    let r = [0, 1, 2].map(|a| (radius_mm / voxel_size[a]).floor() as isize);
    let r2 = radius_mm * radius_mm;
    let mut out = Vec::new();
    for dz in -r[2]..=r[2] {
        for dy in -r[1]..=r[1] {
            for dx in -r[0]..=r[0] {
                let px = dx as f64 * voxel_size[0];
                let py = dy as f64 * voxel_size[1];
                let pz = dz as f64 * voxel_size[2];
                // small slack so that radii landing exactly on a lattice point are inclusive
                if px * px + py * py + pz * pz <= r2 * (1.0 + 1e-12) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Keeps a voxel iff its whole spherical neighborhood lies inside `mask`.
/// Neighbors outside the grid count as outside the mask.
pub fn erode_mask(mask: &Mask, radius_mm: f64) -> Result<Mask> {
    if !(radius_mm >= 0.0 && radius_mm.is_finite()) {
        return Err(Error::InvalidParameter(format!("erosion radius {radius_mm} mm")));
    }
    let dims = mask.dims();
    let offsets = sphere_offsets(radius_mm, mask.voxel_size());
    let mut bits = vec![false; mask.as_volume().len()];
    for i in mask.indices() {
        let (x, y, z) = coords(dims, i);
        let inside = offsets.iter().all(|o| {
            let qx = x as isize + o[0];
            let qy = y as isize + o[1];
            let qz = z as isize + o[2];
            qx >= 0
                && qy >= 0
                && qz >= 0
                && (qx as usize) < dims[0]
                && (qy as usize) < dims[1]
                && (qz as usize) < dims[2]
                && mask.contains(idx(dims, qx as usize, qy as usize, qz as usize))
        });
        bits[i] = inside;
    }
    if !bits.iter().any(|&b| b) {
        return Err(Error::EmptyMask);
    }
    Mask::from_bools(dims, mask.voxel_size(), &bits)
}
