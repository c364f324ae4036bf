//! Central-difference verification of [`Graph::backward`].

use crate::error::{Error, Result};
use crate::par;

use super::{Graph, Tensor, Var};

/// Step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked elements.
    pub max_rel_err: f64,
    /// Largest relative error per leaf, in leaf order.
    pub per_leaf: Vec<f64>,
    /// Number of elements compared.
    pub checked: usize,
    /// `(leaf, element, analytic, numeric)` of the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / den
}

fn eval_loss<F>(f: &F, leaves: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::Dimension(format!("loss must be scalar, got {:?}", v.shape())));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {v}")));
    }
    Ok(v)
}

/// Compare tape gradients of `f` against central differences for every
/// element of every leaf.
pub fn grad_check<F>(leaves: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    grad_check_sampled(leaves, f, usize::MAX)
}

/// Like [`grad_check`] but compares at most `max_per_leaf` evenly strided
/// elements of each leaf.
pub fn grad_check_sampled<F>(leaves: &[Tensor], f: F, max_per_leaf: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut probes = Vec::new();
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let stride = n.div_ceil(max_per_leaf.max(1)).max(1);
        probes.extend((0..n).step_by(stride).map(|e| (li, e)));
    }

    let errs = par::map_indexed(probes.len(), |pi| -> Result<(f64, f64)> {
        let (li, e) = probes[pi];
        let mut perturbed = leaves.to_vec();
        let x0 = leaves[li].data()[e];
        perturbed[li].data_mut()[e] = x0 + GRAD_CHECK_STEP;
        let up = eval_loss(&f, &perturbed)?;
        perturbed[li].data_mut()[e] = x0 - GRAD_CHECK_STEP;
        let down = eval_loss(&f, &perturbed)?;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let analytic = grads.get(vars[li]).map_or(0.0, |t| t.data()[e]);
        Ok((analytic, numeric))
    });

    let mut per_leaf = vec![0.0f64; leaves.len()];
    let mut worst = None;
    let mut worst_err = -1.0;
    for (pi, pair) in errs.into_iter().enumerate() {
        let (analytic, numeric) = pair?;
        let err = relative_error(analytic, numeric);
        let (li, e) = probes[pi];
        per_leaf[li] = per_leaf[li].max(err);
        if err > worst_err {
            worst_err = err;
            worst = Some((li, e, analytic, numeric));
        }
    }
    Ok(GradCheckReport {
        max_rel_err: per_leaf.iter().copied().fold(0.0, f64::max),
        per_leaf,
        checked: probes.len(),
        worst,
    })
}
