//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every node once in reverse topological order. Parameters enter
//! as leaves tagged with their store index; [`Graph::backward`] returns
//! their gradients keyed by that index.

use crate::error::{NnError, Result};
use crate::kernels::{self, AttentionCache, AttentionWeights, Spatial};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dilation: usize,
    },
    GatedConv {
        x: NodeId,
        wf: NodeId,
        bf: NodeId,
        wg: NodeId,
        bg: NodeId,
        dilation: usize,
        slope: f64,
        pre_f: Vec<f64>,
        pre_g: Vec<f64>,
    },
    Deconv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Norm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    ScaleChannels {
        x: NodeId,
        factors: Vec<f64>,
    },
    NonLocal {
        x: NodeId,
        w: [NodeId; 4],
        inner: usize,
        caches: Vec<AttentionCache>,
    },
    L1 {
        pred: NodeId,
        target: NodeId,
        mask: NodeId,
        scale: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter gradients from one backward pass, keyed by store index.
pub type ParamGrads = Vec<(usize, Tensor)>;

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NnError::Shape(msg))
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is wanted (finite-difference checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, index: usize, t: Tensor) -> NodeId {
        self.push(t, Op::Param(index), true)
    }

    fn feature_dims(&self, id: NodeId) -> Result<(usize, usize, Spatial)> {
        self.value(id).dims5()
    }

    fn check_weight(&self, w: NodeId, expect: &[usize], what: &str) -> Result<()> {
        let s = self.value(w).shape();
        if s != expect {
            return shape_err(format!("{what} weight shape {s:?}, expected {expect:?}"));
        }
        Ok(())
    }

    fn bias_slice(&self, b: Option<NodeId>, cout: usize) -> Result<Option<&[f64]>> {
        match b {
            None => Ok(None),
            Some(b) => {
                if self.value(b).len() != cout {
                    return shape_err(format!("bias has {} values, expected {cout}", self.value(b).len()));
                }
                Ok(Some(self.value(b).data()))
            }
        }
    }

    /// Same-padded 3^3 convolution; `w` is `(cout, cin, 3, 3, 3)`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, dilation: usize) -> Result<NodeId> {
        let (bs, cin, sp) = self.feature_dims(x)?;
        let cout = self.value(w).shape().first().copied().unwrap_or(0);
        self.check_weight(w, &[cout, cin, 3, 3, 3], "conv")?;
        let bias = self.bias_slice(b, cout)?;
        let n = kernels::numel(sp);
        let mut out = Vec::with_capacity(bs * cout * n);
        for s in 0..bs {
            let xs = &self.value(x).data()[s * cin * n..][..cin * n];
            out.extend(kernels::conv3d(xs, cin, sp, self.value(w).data(), bias, cout, dilation));
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![bs, cout, sp[0], sp[1], sp[2]], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, dilation }, rg))
    }

    /// `LeakyReLU(conv(x; wf, bf)) * sigmoid(conv(x; wg, bg))`.
    #[allow(clippy::too_many_arguments)]
    pub fn gated_conv(
        &mut self,
        x: NodeId,
        wf: NodeId,
        bf: NodeId,
        wg: NodeId,
        bg: NodeId,
        dilation: usize,
        slope: f64,
    ) -> Result<NodeId> {
        let (bs, cin, sp) = self.feature_dims(x)?;
        let cout = self.value(wf).shape().first().copied().unwrap_or(0);
        self.check_weight(wf, &[cout, cin, 3, 3, 3], "gated conv feature")?;
        self.check_weight(wg, &[cout, cin, 3, 3, 3], "gated conv gate")?;
        let n = kernels::numel(sp);
        let bfs = self.bias_slice(Some(bf), cout)?;
        let bgs = self.bias_slice(Some(bg), cout)?;
        let mut pre_f = Vec::with_capacity(bs * cout * n);
        let mut pre_g = Vec::with_capacity(bs * cout * n);
        let mut col = vec![0.0; cin * 27 * n];
        for s in 0..bs {
            let xs = &self.value(x).data()[s * cin * n..][..cin * n];
            kernels::im2col(xs, cin, sp, dilation, &mut col);
            pre_f.extend(kernels::conv_from_col(&col, cin, n, self.value(wf).data(), bfs, cout));
            pre_g.extend(kernels::conv_from_col(&col, cin, n, self.value(wg).data(), bgs, cout));
        }
        let out: Vec<f64> =
            pre_f.iter().zip(&pre_g).map(|(&a, &g)| if a >= 0.0 { a } else { slope * a } * sigmoid(g)).collect();
        let rg = [x, wf, bf, wg, bg].iter().any(|&i| self.rg(i));
        let value = Tensor::new(vec![bs, cout, sp[0], sp[1], sp[2]], out)?;
        Ok(self.push(value, Op::GatedConv { x, wf, bf, wg, bg, dilation, slope, pre_f, pre_g }, rg))
    }

    /// Transposed convolution doubling each spatial dim; `w` is `(cin, cout, 3, 3, 3)`.
    pub fn deconv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (bs, cin, sp) = self.feature_dims(x)?;
        let cout = self.value(w).shape().get(1).copied().unwrap_or(0);
        self.check_weight(w, &[cin, cout, 3, 3, 3], "deconv")?;
        let bias = self.bias_slice(Some(b), cout)?;
        let n = kernels::numel(sp);
        let mut out = Vec::with_capacity(bs * cout * 8 * n);
        for s in 0..bs {
            let xs = &self.value(x).data()[s * cin * n..][..cin * n];
            out.extend(kernels::deconv3d(xs, cin, sp, self.value(w).data(), bias, cout));
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![bs, cout, 2 * sp[0], 2 * sp[1], 2 * sp[2]], out)?;
        Ok(self.push(value, Op::Deconv { x, w, b }, rg))
    }

    pub fn maxpool(&mut self, x: NodeId) -> Result<NodeId> {
        let (bs, c, sp) = self.feature_dims(x)?;
        if sp.iter().any(|&d| d % 2 != 0) {
            return shape_err(format!("max pooling needs even dims, got {sp:?}"));
        }
        let n = kernels::numel(sp);
        let (mut out, mut argmax) = (Vec::new(), Vec::new());
        for s in 0..bs {
            let (o, a) = kernels::maxpool2(&self.value(x).data()[s * c * n..][..c * n], c, sp);
            out.extend(o);
            argmax.extend(a.into_iter().map(|i| i + s * c * n));
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![bs, c, sp[0] / 2, sp[1] / 2, sp[2] / 2], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Instance normalization followed by a per-channel affine map.
    pub fn norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (bs, c, sp) = self.feature_dims(x)?;
        for (p, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(p).len() != c {
                return shape_err(format!("norm {what} has {} values for {c} channels", self.value(p).len()));
            }
        }
        let n = kernels::numel(sp);
        let (mut xhat, mut inv) = (Vec::with_capacity(bs * c * n), Vec::with_capacity(bs * c));
        for s in 0..bs {
            let (h, i) = kernels::instance_norm(&self.value(x).data()[s * c * n..][..c * n], c, n, eps);
            xhat.extend(h);
            inv.extend(i);
        }
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, h)| gm[(i / n) % c] * h + bt[(i / n) % c]).collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Norm { x, gamma, beta, xhat, inv }, rg))
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, ca, sa) = self.feature_dims(a)?;
        let (bb, cb, sb) = self.feature_dims(b)?;
        if ba != bb || sa != sb {
            return shape_err(format!("concat of {:?} and {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        let n = kernels::numel(sa);
        let mut out = Vec::with_capacity(ba * (ca + cb) * n);
        for s in 0..ba {
            out.extend_from_slice(&self.value(a).data()[s * ca * n..][..ca * n]);
            out.extend_from_slice(&self.value(b).data()[s * cb * n..][..cb * n]);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![ba, ca + cb, sa[0], sa[1], sa[2]], out)?;
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Multiplies channel `c` by the constant `factors[c]`.
    pub fn scale_channels(&mut self, x: NodeId, factors: &[f64]) -> Result<NodeId> {
        let (bs, c, sp) = self.feature_dims(x)?;
        if factors.len() != c {
            return shape_err(format!("{} channel factors for {c} channels", factors.len()));
        }
        let n = kernels::numel(sp);
        let mut out = self.value(x).data().to_vec();
        for (k, chunk) in out.chunks_mut(n).enumerate() {
            let f = factors[k % c];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![bs, c, sp[0], sp[1], sp[2]], out)?;
        Ok(self.push(value, Op::ScaleChannels { x, factors: factors.to_vec() }, rg))
    }

    /// Embedded-Gaussian non-local block with residual output. `w` holds
    /// `theta, phi, g` as `(inner, c)` and `W_z` as `(c, inner)`.
    pub fn nonlocal(&mut self, x: NodeId, w: [NodeId; 4], cap: usize) -> Result<NodeId> {
        let (bs, c, sp) = self.feature_dims(x)?;
        let n = kernels::numel(sp);
        if n > cap {
            return Err(NnError::AttentionTooLarge { positions: n, cap });
        }
        let inner = self.value(w[0]).shape().first().copied().unwrap_or(0);
        for (i, &wi) in w.iter().enumerate() {
            let expect = if i < 3 { [inner, c] } else { [c, inner] };
            self.check_weight(wi, &expect, "non-local")?;
        }
        let mut out = Vec::with_capacity(bs * c * n);
        let mut caches = Vec::with_capacity(bs);
        for s in 0..bs {
            let weights = AttentionWeights {
                theta: self.value(w[0]).data(),
                phi: self.value(w[1]).data(),
                g: self.value(w[2]).data(),
                wz: self.value(w[3]).data(),
            };
            let (z, cache) = kernels::attention(&self.value(x).data()[s * c * n..][..c * n], c, n, inner, weights);
            out.extend(z);
            caches.push(cache);
        }
        let rg = self.rg(x) || w.iter().any(|&i| self.rg(i));
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::NonLocal { x, w, inner, caches }, rg))
    }

    /// Masked L1: per-sample mean of `|pred - target|` over the mask, averaged over the batch.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId, mask: NodeId) -> Result<NodeId> {
        let shape = self.value(pred).shape().to_vec();
        if self.value(target).shape() != shape || self.value(mask).shape() != shape {
            return shape_err("l1 loss operands differ in shape".into());
        }
        let bs = shape[0];
        let per = self.value(pred).len() / bs.max(1);
        let (p, t, m) = (self.value(pred).data(), self.value(target).data(), self.value(mask).data());
        let mut scale = Vec::with_capacity(bs);
        let mut loss = 0.0;
        for s in 0..bs {
            let r = s * per..(s + 1) * per;
            let count: f64 = m[r.clone()].iter().sum();
            if count <= 0.0 {
                return Err(NnError::EmptyMask);
            }
            let sc = 1.0 / (count * bs as f64);
            loss += sc * r.map(|i| m[i] * (p[i] - t[i]).abs()).sum::<f64>();
            scale.push(sc);
        }
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::new(vec![1], vec![loss])?, Op::L1 { pred, target, mask, scale }, rg))
    }

    /// Back-propagates from a scalar node. Returns parameter gradients and,
    /// for inputs created with [`Graph::input_with_grad`], their gradients
    /// via [`Backward::input_grad`].
    pub fn backward(&self, root: NodeId) -> Result<Backward> {
        if self.value(root).len() != 1 {
            return shape_err(format!("backward needs a scalar root, got {:?}", self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(vec![1], 1.0));
        let mut params = Vec::new();
        let mut inputs = Vec::new();
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => inputs.push((NodeId(id), g)),
                Op::Param(p) => params.push((*p, g)),
                op => {
                    for (target, t) in self.node_backward(op, &node.value, &g)? {
                        if !self.rg(target) {
                            continue;
                        }
                        match &mut grads[target.0] {
                            Some(acc) => acc.add_assign(&t),
                            slot => *slot = Some(t),
                        }
                    }
                }
            }
        }
        params.sort_by_key(|p| p.0);
        Ok(Backward { params, inputs })
    }

    fn node_backward(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let mut res = Vec::new();
        match op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, dilation } => {
                let (bs, cin, sp) = self.feature_dims(*x)?;
                let cout = out.shape()[1];
                let n = kernels::numel(sp);
                let wv = self.value(*w).data();
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; cout];
                let need_dx = self.rg(*x);
                let mut dx = vec![0.0; if need_dx { bs * cin * n } else { 0 }];
                let mut col = vec![0.0; cin * 27 * n];
                for s in 0..bs {
                    let xs = &self.value(*x).data()[s * cin * n..][..cin * n];
                    let gs = &g.data()[s * cout * n..][..cout * n];
                    kernels::im2col(xs, cin, sp, *dilation, &mut col);
                    kernels::conv_weight_grad(&col, cin, n, gs, cout, &mut dw, Some(&mut db));
                    if need_dx {
                        kernels::conv_col_grad(wv, cin, n, gs, cout, 0.0, &mut col);
                        kernels::col2im_add(&col, cin, sp, *dilation, &mut dx[s * cin * n..][..cin * n]);
                    }
                }
                res.push((*w, Tensor::new(self.value(*w).shape().to_vec(), dw)?));
                if let Some(b) = b {
                    res.push((*b, Tensor::new(vec![cout], db)?));
                }
                if need_dx {
                    res.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
                }
            }
            Op::GatedConv { x, wf, bf, wg, bg, dilation, slope, pre_f, pre_g } => {
                let (bs, cin, sp) = self.feature_dims(*x)?;
                let cout = out.shape()[1];
                let n = kernels::numel(sp);
                let mut da = vec![0.0; pre_f.len()];
                let mut dgate = vec![0.0; pre_g.len()];
                for i in 0..pre_f.len() {
                    let (a, b) = (pre_f[i], pre_g[i]);
                    let s = sigmoid(b);
                    let (act, dact) = if a >= 0.0 { (a, 1.0) } else { (slope * a, *slope) };
                    da[i] = g.data()[i] * s * dact;
                    dgate[i] = g.data()[i] * act * s * (1.0 - s);
                }
                let (wfv, wgv) = (self.value(*wf).data(), self.value(*wg).data());
                let mut dwf = vec![0.0; wfv.len()];
                let mut dwg = vec![0.0; wgv.len()];
                let mut dbf = vec![0.0; cout];
                let mut dbg = vec![0.0; cout];
                let need_dx = self.rg(*x);
                let mut dx = vec![0.0; if need_dx { bs * cin * n } else { 0 }];
                let mut col = vec![0.0; cin * 27 * n];
                for s in 0..bs {
                    let xs = &self.value(*x).data()[s * cin * n..][..cin * n];
                    let (ga, gb) = (&da[s * cout * n..][..cout * n], &dgate[s * cout * n..][..cout * n]);
                    kernels::im2col(xs, cin, sp, *dilation, &mut col);
                    kernels::conv_weight_grad(&col, cin, n, ga, cout, &mut dwf, Some(&mut dbf));
                    kernels::conv_weight_grad(&col, cin, n, gb, cout, &mut dwg, Some(&mut dbg));
                    if need_dx {
                        kernels::conv_col_grad(wfv, cin, n, ga, cout, 0.0, &mut col);
                        kernels::conv_col_grad(wgv, cin, n, gb, cout, 1.0, &mut col);
                        kernels::col2im_add(&col, cin, sp, *dilation, &mut dx[s * cin * n..][..cin * n]);
                    }
                }
                res.push((*wf, Tensor::new(self.value(*wf).shape().to_vec(), dwf)?));
                res.push((*bf, Tensor::new(vec![cout], dbf)?));
                res.push((*wg, Tensor::new(self.value(*wg).shape().to_vec(), dwg)?));
                res.push((*bg, Tensor::new(vec![cout], dbg)?));
                if need_dx {
                    res.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
                }
            }
            Op::Deconv { x, w, b } => {
                let (bs, cin, sp) = self.feature_dims(*x)?;
                let cout = out.shape()[1];
                let n = kernels::numel(sp);
                let wv = self.value(*w).data();
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; cout];
                let need_dx = self.rg(*x);
                let mut dx = Vec::new();
                for s in 0..bs {
                    let xs = &self.value(*x).data()[s * cin * n..][..cin * n];
                    let gs = &g.data()[s * cout * 8 * n..][..cout * 8 * n];
                    if let Some(d) =
                        kernels::deconv3d_backward(xs, cin, sp, wv, cout, gs, &mut dw, Some(&mut db), need_dx)
                    {
                        dx.extend(d);
                    }
                }
                res.push((*w, Tensor::new(self.value(*w).shape().to_vec(), dw)?));
                res.push((*b, Tensor::new(vec![cout], db)?));
                if need_dx {
                    res.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                for (o, &i) in argmax.iter().enumerate() {
                    dx.data_mut()[i] += g.data()[o];
                }
                res.push((*x, dx));
            }
            Op::Norm { x, gamma, beta, xhat, inv } => {
                let (bs, c, sp) = self.feature_dims(*x)?;
                let n = kernels::numel(sp);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; xhat.len()];
                for (i, (d, h)) in g.data().iter().zip(xhat).enumerate() {
                    let ch = (i / n) % c;
                    dgamma[ch] += d * h;
                    dbeta[ch] += d;
                    dxhat[i] = d * gm[ch];
                }
                res.push((*gamma, Tensor::new(vec![c], dgamma)?));
                res.push((*beta, Tensor::new(vec![c], dbeta)?));
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(xhat.len());
                    for s in 0..bs {
                        let r = s * c * n..(s + 1) * c * n;
                        dx.extend(kernels::instance_norm_backward(
                            &xhat[r.clone()],
                            &inv[s * c..][..c],
                            &dxhat[r],
                            c,
                            n,
                        ));
                    }
                    res.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
                }
            }
            Op::Concat { a, b } => {
                let (bs, ca, sp) = self.feature_dims(*a)?;
                let cb = self.value(*b).shape()[1];
                let n = kernels::numel(sp);
                let (mut da, mut db) = (Vec::with_capacity(bs * ca * n), Vec::with_capacity(bs * cb * n));
                for s in 0..bs {
                    let gs = &g.data()[s * (ca + cb) * n..][..(ca + cb) * n];
                    da.extend_from_slice(&gs[..ca * n]);
                    db.extend_from_slice(&gs[ca * n..]);
                }
                res.push((*a, Tensor::new(self.value(*a).shape().to_vec(), da)?));
                res.push((*b, Tensor::new(self.value(*b).shape().to_vec(), db)?));
            }
            Op::ScaleChannels { x, factors } => {
                let (_, c, sp) = self.feature_dims(*x)?;
                let n = kernels::numel(sp);
                let mut dx = g.data().to_vec();
                for (k, chunk) in dx.chunks_mut(n).enumerate() {
                    let f = factors[k % c];
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                res.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
            }
            Op::NonLocal { x, w, inner, caches } => {
                let (bs, c, sp) = self.feature_dims(*x)?;
                let n = kernels::numel(sp);
                let weights = AttentionWeights {
                    theta: self.value(w[0]).data(),
                    phi: self.value(w[1]).data(),
                    g: self.value(w[2]).data(),
                    wz: self.value(w[3]).data(),
                };
                let mut dws: [Vec<f64>; 4] = std::array::from_fn(|i| vec![0.0; self.value(w[i]).len()]);
                let mut dx = Vec::with_capacity(bs * c * n);
                for (s, cache) in caches.iter().enumerate() {
                    let [d0, d1, d2, d3] = &mut dws;
                    dx.extend(kernels::attention_backward(
                        &self.value(*x).data()[s * c * n..][..c * n],
                        c,
                        n,
                        *inner,
                        weights,
                        cache,
                        &g.data()[s * c * n..][..c * n],
                        [d0, d1, d2, d3],
                    ));
                }
                for (i, d) in dws.into_iter().enumerate() {
                    res.push((w[i], Tensor::new(self.value(w[i]).shape().to_vec(), d)?));
                }
                res.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
            }
            Op::L1 { pred, target, mask, scale } => {
                let (p, t, m) = (self.value(*pred).data(), self.value(*target).data(), self.value(*mask).data());
                let per = p.len() / scale.len();
                let up = g.data()[0];
                let dp: Vec<f64> = (0..p.len())
                    .map(|i| {
                        let d = p[i] - t[i];
                        let sgn = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        up * scale[i / per] * m[i] * sgn
                    })
                    .collect();
                res.push((
                    *target,
                    Tensor::new(self.value(*target).shape().to_vec(), dp.iter().map(|v| -v).collect())?,
                ));
                res.push((*pred, Tensor::new(self.value(*pred).shape().to_vec(), dp)?));
            }
        }
        Ok(res)
    }
}

#[derive(Debug)]
pub struct Backward {
    /// `(store index, gradient)` sorted by index.
    pub params: ParamGrads,
    inputs: Vec<(NodeId, Tensor)>,
}

impl Backward {
    pub fn input_grad(&self, id: NodeId) -> Option<&Tensor> {
        self.inputs.iter().find(|(i, _)| *i == id).map(|(_, t)| t)
    }
}
