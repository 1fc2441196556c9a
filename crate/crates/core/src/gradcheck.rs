//! Central finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares tape gradients of a scalar function against central differences
/// at `point`. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn numeric_grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    numeric_grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        epsilon,
    )
}

/// Same as [`numeric_grad_check`] but over several inputs at once; the error
/// is the maximum across every coordinate of every input.
pub fn numeric_grad_check_many<F>(f: F, points: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(
            "numeric_grad_check",
            format!("epsilon {epsilon} outside (0, 1e-2]"),
        ));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut probe = points.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .unwrap_or_else(|| Tensor::zeros(points[k].shape().to_vec()));
        for i in 0..points[k].numel() {
            let orig = points[k].data()[i];
            probe[k].data_mut()[i] = orig + epsilon;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - epsilon;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
