//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central finite differences at `point`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
/// A NaN result signals that `f` is unstable at the evaluation point. The
/// check is meaningful only when no coordinate sits within `h` of a
/// relu/max kink.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("grad_check: step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_grad());
    let loss = f(&mut tape, x)?;
    if tape.value(loss).shape() != (1, 1) {
        let (r, c) = tape.value(loss).shape();
        return Err(Error::Contract(format!(
            "grad_check: f must be scalar-valued, produced {r}x{c}"
        )));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(x)
        .ok_or_else(|| Error::Contract("grad_check: point received no gradient".into()))?
        .to_vec();

    let eval = |data: &[f64]| -> Result<f64> {
        let t = Tensor::new(point.rows(), point.cols(), data.to_vec())?;
        let mut tape = Tape::new();
        let x = tape.leaf(t);
        let loss = f(&mut tape, x)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut probe = point.data().to_vec();
    let mut max_err = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
