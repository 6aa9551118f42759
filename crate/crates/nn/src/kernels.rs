//! Per-sample compute kernels: 3^3 convolutions via im2col + GEMM,
//! stride-2 transposed convolution, 2^3 max pooling, instance
//! normalization and embedded-Gaussian attention. Buffers are
//! channel-major `(c, z, y, x)` with x fastest.

/// Spatial extent `[z, y, x]`.
pub type Spatial = [usize; 3];

pub fn numel(sp: Spatial) -> usize {
    sp[0] * sp[1] * sp[2]
}

/// Row-major `c = beta c + op(a) op(b)` with `op(a)` m x k and `op(b)` k x n.
/// `ta` / `tb` read `a` / `b` as stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe in-bounds m x k, k x n and m x n views,
    // checked by the length asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Valid destination range `[lo, hi)` along an axis of length `n` for source offset `off`.
fn valid_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// `col[(ci*27 + kz*9 + ky*3 + kx), p] = x[ci, p + (k - 1) * dilation]`, zero outside.
pub fn im2col(x: &[f64], cin: usize, sp: Spatial, dilation: usize, col: &mut [f64]) {
    let n = numel(sp);
    let [nz, ny, nx] = sp;
    let d = dilation as isize;
    for ci in 0..cin {
        let src = &x[ci * n..][..n];
        for kz in 0..3 {
            let oz = (kz as isize - 1) * d;
            let (z0, z1) = valid_range(nz, oz);
            for ky in 0..3 {
                let oy = (ky as isize - 1) * d;
                let (y0, y1) = valid_range(ny, oy);
                for kx in 0..3 {
                    let ox = (kx as isize - 1) * d;
                    let (x0, x1) = valid_range(nx, ox);
                    let row = &mut col[((ci * 27) + kz * 9 + ky * 3 + kx) * n..][..n];
                    row.iter_mut().for_each(|v| *v = 0.0);
                    if x0 == x1 {
                        continue;
                    }
                    for z in z0..z1 {
                        let sz = (z as isize + oz) as usize;
                        for y in y0..y1 {
                            let sy = (y as isize + oy) as usize;
                            let dst = (z * ny + y) * nx;
                            let s = (sz * ny + sy) * nx;
                            let sx0 = (x0 as isize + ox) as usize;
                            row[dst + x0..dst + x1].copy_from_slice(&src[s + sx0..s + sx0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back and adds into `dx`.
pub fn col2im_add(col: &[f64], cin: usize, sp: Spatial, dilation: usize, dx: &mut [f64]) {
    let n = numel(sp);
    let [nz, ny, nx] = sp;
    let d = dilation as isize;
    for ci in 0..cin {
        let dst_ch = &mut dx[ci * n..][..n];
        for kz in 0..3 {
            let oz = (kz as isize - 1) * d;
            let (z0, z1) = valid_range(nz, oz);
            for ky in 0..3 {
                let oy = (ky as isize - 1) * d;
                let (y0, y1) = valid_range(ny, oy);
                for kx in 0..3 {
                    let ox = (kx as isize - 1) * d;
                    let (x0, x1) = valid_range(nx, ox);
                    if x0 == x1 {
                        continue;
                    }
                    let row = &col[((ci * 27) + kz * 9 + ky * 3 + kx) * n..][..n];
                    for z in z0..z1 {
                        let sz = (z as isize + oz) as usize;
                        for y in y0..y1 {
                            let sy = (y as isize + oy) as usize;
                            let p = (z * ny + y) * nx;
                            let s = (sz * ny + sy) * nx;
                            let sx0 = (x0 as isize + ox) as usize;
                            for (t, v) in dst_ch[s + sx0..s + sx0 + (x1 - x0)].iter_mut().zip(&row[p + x0..p + x1]) {
                                *t += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], n: usize) {
    for (c, b) in bias.iter().enumerate() {
        out[c * n..][..n].iter_mut().for_each(|v| *v += b);
    }
}

fn row_sums(d: &[f64], rows: usize, n: usize, acc: &mut [f64]) {
    for r in 0..rows {
        acc[r] += d[r * n..][..n].iter().sum::<f64>();
    }
}

/// Same-padded 3^3 convolution of one sample given its im2col buffer.
/// `w` is `(cout, cin, 3, 3, 3)`.
pub fn conv_from_col(col: &[f64], cin: usize, n: usize, w: &[f64], bias: Option<&[f64]>, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * n];
    gemm(cout, cin * 27, n, w, false, col, false, 0.0, &mut out);
    if let Some(b) = bias {
        add_bias(&mut out, b, n);
    }
    out
}

pub fn conv3d(
    x: &[f64],
    cin: usize,
    sp: Spatial,
    w: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    dilation: usize,
) -> Vec<f64> {
    let n = numel(sp);
    let mut col = vec![0.0; cin * 27 * n];
    im2col(x, cin, sp, dilation, &mut col);
    conv_from_col(&col, cin, n, w, bias, cout)
}

/// Accumulates `dw += dout col^T` and `db += sum dout`.
pub fn conv_weight_grad(
    col: &[f64],
    cin: usize,
    n: usize,
    dout: &[f64],
    cout: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    gemm(cout, n, cin * 27, dout, false, col, true, 1.0, dw);
    if let Some(db) = db {
        row_sums(dout, cout, n, db);
    }
}

/// `dcol (+)= w^T dout`.
pub fn conv_col_grad(w: &[f64], cin: usize, n: usize, dout: &[f64], cout: usize, beta: f64, dcol: &mut [f64]) {
    gemm(cin * 27, cout, n, w, true, dout, false, beta, dcol);
}

/// Transposed convolution, kernel 3, stride 2, padding 1, output padding 1:
/// `out[2 i + k - 1] += w[ci, co, k] x[ci, i]`, doubling every spatial dim.
/// `w` is `(cin, cout, 3, 3, 3)`.
pub fn deconv3d(x: &[f64], cin: usize, sp: Spatial, w: &[f64], bias: Option<&[f64]>, cout: usize) -> Vec<f64> {
    let n = numel(sp);
    let mut cols = vec![0.0; cout * 27 * n];
    gemm(cout * 27, cin, n, w, true, x, false, 0.0, &mut cols);
    let osp = [2 * sp[0], 2 * sp[1], 2 * sp[2]];
    let on = numel(osp);
    let mut out = vec![0.0; cout * on];
    deconv_scatter(&cols, cout, sp, &mut out);
    if let Some(b) = bias {
        add_bias(&mut out, b, on);
    }
    out
}

/// Output coordinate `2 i + k - 1` when inside `[0, 2 n)`.
#[inline]
fn up(i: usize, k: usize, n: usize) -> Option<usize> {
    let o = 2 * i + k;
    if o == 0 || o > 2 * n {
        None
    } else {
        Some(o - 1)
    }
}

fn deconv_scatter(cols: &[f64], cout: usize, sp: Spatial, out: &mut [f64]) {
    let n = numel(sp);
    let [nz, ny, nx] = sp;
    let (oy_n, ox_n) = (2 * ny, 2 * nx);
    let on = 8 * n;
    for co in 0..cout {
        let dst = &mut out[co * on..][..on];
        for k in 0..27 {
            let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
            let row = &cols[(co * 27 + k) * n..][..n];
            for z in 0..nz {
                let Some(oz) = up(z, kz, nz) else { continue };
                for y in 0..ny {
                    let Some(oy) = up(y, ky, ny) else { continue };
                    let base = (oz * oy_n + oy) * ox_n;
                    let src = &row[(z * ny + y) * nx..][..nx];
                    for (x, v) in src.iter().enumerate() {
                        if let Some(ox) = up(x, kx, nx) {
                            dst[base + ox] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of the scatter: `g[co*27 + k, i] = dout[co, 2 i + k - 1]`.
fn deconv_gather(dout: &[f64], cout: usize, sp: Spatial) -> Vec<f64> {
    let n = numel(sp);
    let [nz, ny, nx] = sp;
    let (oy_n, ox_n) = (2 * ny, 2 * nx);
    let on = 8 * n;
    let mut g = vec![0.0; cout * 27 * n];
    for co in 0..cout {
        let src = &dout[co * on..][..on];
        for k in 0..27 {
            let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
            let row = &mut g[(co * 27 + k) * n..][..n];
            for z in 0..nz {
                let Some(oz) = up(z, kz, nz) else { continue };
                for y in 0..ny {
                    let Some(oy) = up(y, ky, ny) else { continue };
                    let base = (oz * oy_n + oy) * ox_n;
                    let dst = &mut row[(z * ny + y) * nx..][..nx];
                    for (x, v) in dst.iter_mut().enumerate() {
                        if let Some(ox) = up(x, kx, nx) {
                            *v = src[base + ox];
                        }
                    }
                }
            }
        }
    }
    g
}

/// Gradients of [`deconv3d`]: accumulates into `dw`, `db`, and returns `dx` if requested.
#[allow(clippy::too_many_arguments)]
pub fn deconv3d_backward(
    x: &[f64],
    cin: usize,
    sp: Spatial,
    w: &[f64],
    cout: usize,
    dout: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Vec<f64>> {
    let n = numel(sp);
    let g = deconv_gather(dout, cout, sp);
    gemm(cin, n, cout * 27, x, false, &g, true, 1.0, dw);
    if let Some(db) = db {
        row_sums(dout, cout, 8 * n, db);
    }
    need_dx.then(|| {
        let mut dx = vec![0.0; cin * n];
        gemm(cin, cout * 27, n, w, false, &g, false, 0.0, &mut dx);
        dx
    })
}

/// 2^3 max pooling with stride 2. Returns pooled values and the flat
/// input index of each maximum (first one on ties).
pub fn maxpool2(x: &[f64], c: usize, sp: Spatial) -> (Vec<f64>, Vec<usize>) {
    let [nz, ny, nx] = sp;
    let (pz, py, px) = (nz / 2, ny / 2, nx / 2);
    let n = numel(sp);
    let pn = pz * py * px;
    let mut out = vec![0.0; c * pn];
    let mut arg = vec![0; c * pn];
    for ch in 0..c {
        for z in 0..pz {
            for y in 0..py {
                for xx in 0..px {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ch * n + ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * xx + dx;
                                if x[i] > best || (dz, dy, dx) == (0, 0, 0) {
                                    best = x[i];
                                    bi = i;
                                }
                            }
                        }
                    }
                    let o = ch * pn + (z * py + y) * px + xx;
                    out[o] = best;
                    arg[o] = bi;
                }
            }
        }
    }
    (out, arg)
}

/// Per-channel `xhat = (x - mean) / sqrt(var + eps)` (biased variance).
/// Returns `xhat` and the per-channel `1 / sqrt(var + eps)`.
pub fn instance_norm(x: &[f64], c: usize, n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; c * n];
    let mut inv = vec![0.0; c];
    for ch in 0..c {
        let s = &x[ch * n..][..n];
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv[ch] = is;
        for (o, v) in xhat[ch * n..][..n].iter_mut().zip(s) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv)
}

/// `dx` from `d xhat` for [`instance_norm`].
pub fn instance_norm_backward(xhat: &[f64], inv: &[f64], dxhat: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; c * n];
    let nf = n as f64;
    for ch in 0..c {
        let xh = &xhat[ch * n..][..n];
        let dh = &dxhat[ch * n..][..n];
        let sum_d: f64 = dh.iter().sum();
        let sum_dx: f64 = dh.iter().zip(xh).map(|(a, b)| a * b).sum();
        for ((o, d), h) in dx[ch * n..][..n].iter_mut().zip(dh).zip(xh) {
            *o = inv[ch] / nf * (nf * d - sum_d - h * sum_dx);
        }
    }
    dx
}

/// Saved intermediates of one attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub g: Vec<f64>,
    /// Row-softmax attention weights, `n x n`.
    pub attn: Vec<f64>,
    pub y: Vec<f64>,
}

/// Weights of the non-local block: `theta`, `phi`, `g` are `(inner, c)`, `wz` is `(c, inner)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'a> {
    pub theta: &'a [f64],
    pub phi: &'a [f64],
    pub g: &'a [f64],
    pub wz: &'a [f64],
}

/// `z = wz y + x` with `y_i = sum_j softmax_j(theta_i . phi_j) g_j`.
pub fn attention(x: &[f64], c: usize, n: usize, inner: usize, w: AttentionWeights) -> (Vec<f64>, AttentionCache) {
    let proj = |m: &[f64]| {
        let mut o = vec![0.0; inner * n];
        gemm(inner, c, n, m, false, x, false, 0.0, &mut o);
        o
    };
    let (theta, phi, g) = (proj(w.theta), proj(w.phi), proj(w.g));
    let mut attn = vec![0.0; n * n];
    gemm(n, inner, n, &theta, true, &phi, false, 0.0, &mut attn);
    for row in attn.chunks_mut(n) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    let mut y = vec![0.0; inner * n];
    gemm(inner, n, n, &g, false, &attn, true, 0.0, &mut y);
    let mut z = x.to_vec();
    gemm(c, inner, n, w.wz, false, &y, false, 1.0, &mut z);
    (z, AttentionCache { theta, phi, g, attn, y })
}

/// Gradients of [`attention`]. Accumulates into the weight gradients
/// (same order as [`AttentionWeights`]) and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    x: &[f64],
    c: usize,
    n: usize,
    inner: usize,
    w: AttentionWeights,
    cache: &AttentionCache,
    dz: &[f64],
    dw: [&mut [f64]; 4],
) -> Vec<f64> {
    let [dth_w, dph_w, dg_w, dwz] = dw;
    gemm(c, n, inner, dz, false, &cache.y, true, 1.0, dwz);
    let mut dy = vec![0.0; inner * n];
    gemm(inner, c, n, w.wz, true, dz, false, 0.0, &mut dy);
    let mut da = vec![0.0; n * n];
    gemm(n, inner, n, &dy, true, &cache.g, false, 0.0, &mut da);
    let mut dg = vec![0.0; inner * n];
    gemm(inner, n, n, &dy, false, &cache.attn, false, 0.0, &mut dg);
    // softmax backward, row-wise
    let mut df = vec![0.0; n * n];
    for i in 0..n {
        let a = &cache.attn[i * n..][..n];
        let d = &da[i * n..][..n];
        let dot: f64 = a.iter().zip(d).map(|(p, q)| p * q).sum();
        for j in 0..n {
            df[i * n + j] = a[j] * (d[j] - dot);
        }
    }
    let mut dtheta = vec![0.0; inner * n];
    gemm(inner, n, n, &cache.phi, false, &df, true, 0.0, &mut dtheta);
    let mut dphi = vec![0.0; inner * n];
    gemm(inner, n, n, &cache.theta, false, &df, false, 0.0, &mut dphi);

    let mut dx = dz.to_vec();
    for (dproj, wm, dwm) in [(&dtheta, w.theta, dth_w), (&dphi, w.phi, dph_w), (&dg, w.g, dg_w)] {
        gemm(inner, n, c, dproj, false, x, true, 1.0, dwm);
        gemm(c, inner, n, wm, true, dproj, false, 1.0, &mut dx);
    }
    dx
}
