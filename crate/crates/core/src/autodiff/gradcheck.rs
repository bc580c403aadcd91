use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` records its computation on the supplied tape, starting from the input
/// node. Returns the maximum over coordinates of
/// `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`.
///
/// The function must be smooth at `point`; clamp boundaries are excluded.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(contract(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.gradients(y)?;
    let analytic = grads
        .get(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p.clone());
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + epsilon;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - epsilon;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let fd = (up - down) / (2.0 * epsilon);
        let ad = analytic[i];
        worst = worst.max((ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs()));
    }
    Ok(worst)
}
