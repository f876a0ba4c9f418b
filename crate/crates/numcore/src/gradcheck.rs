//! Central finite-difference checks for graph-built functions.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor of [`rel_err`]; keeps near-zero gradients from turning
/// rounding noise into large relative errors.
pub const REL_FLOOR: f64 = 1e-7;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for a scalar function of a flat vector.
pub fn central_diff(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let up = f(&probe);
    probe[i] = x[i] - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of `build` against central differences
/// for every element of every input.
pub fn check(
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ins.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut report = GradCheckReport::default();
    for (ii, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let mut probe = inputs.to_vec();
            probe[ii].data_mut()[e] = t.data()[e] + h;
            let up = eval(&probe)?;
            probe[ii].data_mut()[e] = t.data()[e] - h;
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[ii][e], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ii, e, analytic[ii][e], numeric));
            }
        }
    }
    Ok(report)
}
