use crate::error::Result;
use crate::tensor::Tensor;

use super::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)` over
    /// every checked coordinate.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares tape gradients with central finite differences at 64-bit.
///
/// `f` builds a scalar from leaf vars bound to `inputs`; it is re-run once per
/// perturbed coordinate, so the numeric side never touches the backward pass.
/// `max_coords` caps the coordinates probed per input (evenly strided).
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    max_coords: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let n = input.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let mut xs = inputs.to_vec();
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + step;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - step;
            let down = eval(&xs)?;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
    })
}
