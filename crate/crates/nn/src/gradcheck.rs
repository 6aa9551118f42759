//! Central finite-difference gradient checking for graph-built functions.

use crate::error::{NnError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(leaf, coordinate, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// `(analytic, numeric)` of every probed coordinate.
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    /// Mixed test `|a - n| <= rtol * max(|a|, |n|) + atol` on every entry.
    pub fn passes_mixed(&self, rtol: f64, atol: f64) -> bool {
        self.pairs.iter().all(|&(a, n)| (a - n).abs() <= rtol * a.abs().max(n.abs()) + atol)
    }
}

/// `|a - n| / max(|a|, |n|)`, or the absolute difference when both are below `1e-8`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

fn evaluate<F>(leaves: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    Ok(g.value(out).data()[0])
}

/// Compares backprop gradients of the scalar built by `build` against
/// central differences with step `h`. At most `per_leaf` evenly spaced
/// coordinates of each leaf are probed.
pub fn check_gradients<F>(leaves: &[Tensor], h: f64, per_leaf: usize, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    let back = g.backward(root)?;
    let mut report = GradCheck { checked: 0, max_rel_err: 0.0, worst: None, pairs: Vec::new() };
    let mut work = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let zeros = Tensor::zeros(leaf.shape().to_vec());
        let analytic = back.input_grad(ids[li]).unwrap_or(&zeros);
        let n = leaf.len();
        let count = per_leaf.min(n).max(1);
        for t in 0..count {
            let i = if count == n { t } else { t * n / count + (n / count) / 2 };
            let orig = leaf.data()[i];
            work[li].data_mut()[i] = orig + h;
            let fp = evaluate(&work, &build)?;
            work[li].data_mut()[i] = orig - h;
            let fm = evaluate(&work, &build)?;
            work[li].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(NnError::NonFiniteGradient(format!("leaf {li} coordinate {i}")));
            }
            let a = analytic.data()[i];
            let e = rel_err(a, numeric);
            report.checked += 1;
            report.pairs.push((a, numeric));
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((li, i, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Offset of the fixed readout target below zero.
const READOUT_FLOOR: f64 = 10.0;

/// Smooth scalar readout `sum_i w_i (out_i + floor) / sum_i w_i`, built from the
/// masked L1 op with a fixed target far below the output so no kink is
/// crossed. Fails if an output reaches the target.
pub fn linear_readout(g: &mut Graph, out: NodeId, weights: &Tensor) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let lo = g.value(out).data().iter().copied().fold(f64::INFINITY, f64::min);
    if lo <= -READOUT_FLOOR {
        return Err(NnError::Config(format!("output {lo} below readout floor")));
    }
    let target = g.input(Tensor::filled(shape, -READOUT_FLOOR));
    let w = g.input(weights.clone());
    g.l1_loss(out, target, w)
}
