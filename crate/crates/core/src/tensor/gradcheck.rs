//! Central finite-difference verification of tape gradients.
//!
//! The check instantiates the generic kernels at f64: the same source code
//! the f32 pipeline runs, but with enough precision that the difference
//! quotient is meaningful at small steps. A pure-f32 central difference at
//! eps = 1e-3 carries ~1e-2 absolute noise from forward rounding alone, which
//! would drown the tolerances being asserted.

use crate::error::{Error, Result};
use crate::tensor::{TapeOf, TensorId, TensorOf};

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative discrepancy over all checked elements.
    pub max_rel: f64,
    /// (input index, element index) where it occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Number of elements compared.
    pub checked: usize,
}

/// Compare tape gradients of a scalar-valued function against central
/// differences at step `epsilon`.
///
/// The discrepancy for one element is |a - n| / max(|a|, |n|, 0.1); the floor
/// makes the comparison absolute where the derivative itself is near zero.
///
/// `max_per_input` caps how many elements of each input are perturbed
/// (deterministically spread over the buffer); `None` checks every element.
pub fn check_gradients<F>(
    f: F,
    inputs: &[TensorOf<f64>],
    epsilon: f64,
    max_per_input: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut TapeOf<f64>, &[TensorId]) -> Result<TensorId>,
{
    // Analytic pass.
    let mut tape = TapeOf::<f64>::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if tape.numel(out) != 1 {
        return Err(Error::contract(format!(
            "check_gradients: function output must be scalar, got {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |variants: &[TensorOf<f64>]| -> Result<f64> {
        let mut tape = TapeOf::<f64>::new();
        let ids: Vec<TensorId> = variants.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &ids)?;
        Ok(tape.data(out)[0])
    };

    let mut report =
        GradCheckReport { max_rel: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work: Vec<TensorOf<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match max_per_input {
            Some(cap) if cap < n => (0..cap).map(|j| j * n / cap).collect(),
            _ => (0..n).collect(),
        };
        for ei in picks {
            let orig = work[ii].data[ei];
            work[ii].data[ei] = orig + epsilon;
            let fp = eval(&work)?;
            work[ii].data[ei] = orig - epsilon;
            let fm = eval(&work)?;
            work[ii].data[ei] = orig;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic[ii][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(0.1);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = (ii, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Assert helper: panics with a located message when the check exceeds `tol`.
pub fn assert_gradients<F>(
    f: F,
    inputs: &[TensorOf<f64>],
    epsilon: f64,
    tol: f64,
    max_per_input: Option<usize>,
) where
    F: Fn(&mut TapeOf<f64>, &[TensorId]) -> Result<TensorId>,
{
    let report = check_gradients(f, inputs, epsilon, max_per_input).expect("gradcheck eval failed");
    assert!(
        report.max_rel <= tol,
        "gradient check failed: rel {} > {} at input {} elem {} (analytic {}, numeric {}, {} checked)",
        report.max_rel,
        tol,
        report.worst.0,
        report.worst.1,
        report.analytic,
        report.numeric,
        report.checked
    );
}
