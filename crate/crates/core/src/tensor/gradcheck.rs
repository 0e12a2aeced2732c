//! Central finite-difference verification of [`Graph::backward`].
//!
//! The checker only ever calls forward code: the reference derivative of
//! every input element is `(f(x + h) − f(x − h)) / 2h`, evaluated in `f64`.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so exactly-zero derivatives
/// compare on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic gradients of the scalar produced by `build` with
/// central differences of step `step`, for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| graph.constant(t.clone())).collect();
        let out = build(&mut graph, &vars)?;
        graph
            .value(out)
            .item()
            .ok_or_else(|| Error::shape("gradcheck", "objective is not scalar"))
    };

    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = build(&mut graph, &vars)?;
    graph.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match graph.grad(*var) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; inputs[i].numel()];
                &zeros
            }
        };
        for j in 0..inputs[i].numel() {
            let original = inputs[i].data()[j];
            probe[i].data_mut()[j] = original + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = original - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = analytic[j];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
