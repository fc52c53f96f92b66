//! Gradient verification by central finite differences.

use crate::error::{CoreError, Result};
use crate::tape::{NodeId, TapeGraph};
use crate::tensor::Tensor;

/// Compare the tape's analytic gradient of a scalar function against
/// central finite differences at every coordinate of `x`.
///
/// `build` must deterministically construct the scalar loss from the
/// node holding `x`. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`; any non-finite
/// comparison yields infinity so it reads as a failure against any
/// tolerance.
pub fn finite_diff_check<F>(build: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut TapeGraph, NodeId) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(CoreError::contract(format!(
            "finite_diff_check step h={h} outside [1e-7, 1e-3]"
        )));
    }

    let mut graph = TapeGraph::new();
    let xid = graph.leaf(x.clone());
    let loss = build(&mut graph, xid)?;
    if graph.value(loss).numel() != 1 {
        return Err(CoreError::contract("finite_diff_check needs a scalar function"));
    }
    graph.backward(loss)?;
    let analytic = graph.grad(xid);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = TapeGraph::new();
        let id = g.leaf(probe.clone());
        let l = build(&mut g, id)?;
        g.value(l).item()
    };

    let mut max_err: f64 = 0.0;
    for i in 0..x.numel() {
        let fp = eval(&x.nudged(i, h)?)?;
        let fm = eval(&x.nudged(i, -h)?)?;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let err = if numeric.is_finite() && a.is_finite() {
            (a - numeric).abs() / a.abs().max(1.0)
        } else {
            f64::INFINITY
        };
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
