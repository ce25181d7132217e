use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences at
/// every coordinate of every input.
///
/// The error measure is `|a - n| / max(1, |a|, |n|)`, so tiny gradients are
/// compared absolutely and large ones relatively.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars = tape.constants(xs);
        Ok(f(&tape, &vars)?.value().item())
    };

    let tape = Tape::new();
    let vars = tape.leaves(inputs);
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.collect(&vars);

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            max_rel_err = max_rel_err.max(err);
            checked += 1;
        }
    }
    Ok(GradcheckReport { max_rel_err, checked })
}
