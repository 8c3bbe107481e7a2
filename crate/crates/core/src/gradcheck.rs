//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! independent route to the gradient the tape computes.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so that near-zero gradients
    /// are compared absolutely.
    pub floor: f64,
    /// Per input, at most this many coordinates are probed (evenly strided).
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-4,
            max_coords: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (input index, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_scalar<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences for every input in `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ii], input.shape());
        let n = input.numel();
        let stride = (n / opts.max_coords.max(1)).max(1);
        for c in (0..n).step_by(stride) {
            let base = input.data()[c];
            probe[ii] = with_coord(input, c, base + opts.step);
            let fp = eval_scalar(&probe, &f)?;
            probe[ii] = with_coord(input, c, base - opts.step);
            let fm = eval_scalar(&probe, &f)?;
            probe[ii] = input.clone();
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[c];
            let err = relative_error(a, numeric, opts.floor);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ii, c, a, numeric));
            }
        }
    }
    Ok(report)
}

fn with_coord(t: &Tensor<f64>, c: usize, v: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[c] = v;
    Tensor::from_parts(t.shape().to_vec(), data)
}
