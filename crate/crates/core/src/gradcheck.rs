//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function on constant
//! inputs, so it never touches any backward rule.

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Entries whose magnitudes are both below this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, ABS_FLOOR)`.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compares tape gradients of the scalar produced by `f` against central
/// differences with the given `step`, for every element of every input.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(&loss)?;
        vars.iter().map(|v| grads.get(v)).collect::<Vec<_>>()
    };

    let eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?.value();
        Ok(out.data()[0])
    };

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        numeric.push(g);
    }

    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (x, y)) in a.data().iter().zip(n.data()).enumerate() {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(ABS_FLOOR);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (i, j);
            }
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
