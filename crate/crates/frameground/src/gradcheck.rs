//! Finite-difference verification of parameter gradients.
//!
//! Central differences with step `eps` against the tape's analytic
//! gradients, comparing by relative error with an absolute floor:
//! `|a - n| / max(|a|, |n|, FLOOR)`. The floor makes the implied absolute
//! tolerance FLOOR * DEFAULT_TOL = 1e-8, i.e. sqrt of f64 machine epsilon:
//! central differences of a deep graph carry ~1e-10 of subtraction noise
//! even where the true gradient is exactly zero (softmax shift-invariant
//! directions such as key biases), while any structural gradient bug shows
//! up orders of magnitude above 1e-8.

use ndarray::Array2;

use crate::autodiff::{NodeId, Tape};
use crate::model::{Model, TapeParams};

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Relative-error tolerance used across the test suites.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Absolute floor of the relative-error denominator.
const FLOOR: f64 = 1e-4;

/// Outcome of a full-parameter gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest relative error over every parameter scalar.
    pub max_rel_err: f64,
    /// Number of scalars compared.
    pub checked: usize,
    /// Where the largest error occurred: parameter name, flat index,
    /// analytic value, numeric value.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compare analytic parameter gradients of a scalar-valued graph against
/// central finite differences, across every scalar of every parameter.
///
/// `scalar_fn` must rebuild the same graph for the model's current parameter
/// values on each call (inputs captured by the closure, no fresh
/// randomness) and return a 1 x 1 root node.
pub fn check_param_gradients<F>(model: &mut Model, eps: f64, mut scalar_fn: F) -> GradReport
where
    F: FnMut(&Model, &mut Tape, &TapeParams) -> NodeId,
{
    let (analytic, _) = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let root = scalar_fn(model, &mut tape, &bound);
        let grads = tape.backward(root);
        let analytic: Vec<Array2<f64>> = bound
            .ordered_ids()
            .iter()
            .zip(model.params.entries())
            .map(|(&id, (_, value))| {
                grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(value.dim()))
            })
            .collect();
        (analytic, tape.scalar(root))
    };

    let eval = |model: &mut Model, scalar_fn: &mut F| -> f64 {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let root = scalar_fn(model, &mut tape, &bound);
        tape.scalar(root)
    };

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut worst = None;
    let names: Vec<String> = model.params.entries().iter().map(|(n, _)| n.clone()).collect();
    for (entry_idx, name) in names.iter().enumerate() {
        let dim = model.params.get(name).dim();
        for i in 0..dim.0 {
            for j in 0..dim.1 {
                let original = model.params.get(name)[[i, j]];
                model.params.get_mut(name)[[i, j]] = original + eps;
                let plus = eval(model, &mut scalar_fn);
                model.params.get_mut(name)[[i, j]] = original - eps;
                let minus = eval(model, &mut scalar_fn);
                model.params.get_mut(name)[[i, j]] = original;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[entry_idx][[i, j]];
                let err = rel_err(a, numeric);
                if err > max_rel_err {
                    max_rel_err = err;
                    worst = Some((name.clone(), i * dim.1 + j, a, numeric));
                }
                checked += 1;
            }
        }
    }
    GradReport { max_rel_err, checked, worst }
}
