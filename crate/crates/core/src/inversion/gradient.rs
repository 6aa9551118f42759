//! Forward differences with circular boundary and their adjoint.

use crate::volume::Dims;

/// `g[a][i] = v[i + e_a] - v[i]`, wrapping at the edges.
pub fn forward_gradient(dims: Dims, v: &[f64]) -> [Vec<f64>; 3] {
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let mut g = [vec![0.0; v.len()], vec![0.0; v.len()], vec![0.0; v.len()]];
    for z in 0..nz {
        let zn = if z + 1 == nz { 0 } else { z + 1 };
        for y in 0..ny {
            let yn = if y + 1 == ny { 0 } else { y + 1 };
            let row = nx * y + plane * z;
            for x in 0..nx {
                let xn = if x + 1 == nx { 0 } else { x + 1 };
                let i = row + x;
                let c = v[i];
                g[0][i] = v[row + xn] - c;
                g[1][i] = v[nx * yn + plane * z + x] - c;
                g[2][i] = v[nx * y + plane * zn + x] - c;
            }
        }
    }
    g
}

/// Adjoint of [`forward_gradient`]: `(G^T g)[i] = sum_a g[a][i - e_a] - g[a][i]`.
pub fn divergence_adjoint(dims: Dims, g: &[Vec<f64>; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let mut out = vec![0.0; nx * ny * nz];
    for z in 0..nz {
        let zp = if z == 0 { nz - 1 } else { z - 1 };
        for y in 0..ny {
            let yp = if y == 0 { ny - 1 } else { y - 1 };
            let row = nx * y + plane * z;
            for x in 0..nx {
                let xp = if x == 0 { nx - 1 } else { x - 1 };
                let i = row + x;
                out[i] = g[0][row + xp] - g[0][i] + g[1][nx * yp + plane * z + x] - g[1][i]
                    + g[2][nx * y + plane * zp + x]
                    - g[2][i];
            }
        }
    }
    out
}

pub fn gradient_magnitude(dims: Dims, v: &[f64]) -> Vec<f64> {
    let g = forward_gradient(dims, v);
    (0..v.len()).map(|i| (g[0][i].powi(2) + g[1][i].powi(2) + g[2][i].powi(2)).sqrt()).collect()
}

/// `sum_a |2 sin(pi m_a / n_a)|^2`, the spectrum of `G^T G`.
pub fn laplacian_spectrum(dims: Dims) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        (0..n).map(|m| 2.0 - 2.0 * (std::f64::consts::TAU * m as f64 / n as f64).cos()).collect()
    };
    let (ex, ey, ez) = (axis(dims[0]), axis(dims[1]), axis(dims[2]));
    let mut out = Vec::with_capacity(dims.iter().product());
    for &cz in &ez {
        for &cy in &ey {
            for &cx in &ex {
                out.push(cx + cy + cz);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::Fft3;

    #[test]
    fn adjoint_identity() {
        let d = [5, 4, 3];
        let n = 60;
        let v: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let w: [Vec<f64>; 3] = [0, 1, 2].map(|a| (0..n).map(|i| ((i * (a + 3)) % 13) as f64 - 6.0).collect());
        let g = forward_gradient(d, &v);
        let lhs: f64 = (0..3).map(|a| g[a].iter().zip(&w[a]).map(|(x, y)| x * y).sum::<f64>()).sum();
        let rhs: f64 = v.iter().zip(divergence_adjoint(d, &w)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn laplacian_spectrum_diagonalizes_gtg() {
        let d = [6, 5, 4];
        let v: Vec<f64> = (0..120).map(|i| ((i * 37) % 17) as f64 * 0.1).collect();
        let direct = divergence_adjoint(d, &forward_gradient(d, &v));
        let plan = Fft3::new(d).unwrap();
        let via_fft = plan.filter_real(&v, &laplacian_spectrum(d));
        for (a, b) in direct.iter().zip(&via_fft) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
