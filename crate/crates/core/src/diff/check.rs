//! Central-difference gradient checking.

use crate::array::Array;
use crate::error::{HctError, Result};

use super::{DiffArray, Tape};

/// Compare the tape gradient of a scalar-valued function against central
/// differences at `point`. Returns the max over coordinates of
/// `|analytic - central| / max(1, |central|)`.
///
/// The function must be deterministic; it is re-evaluated `2n + 1` times.
pub fn grad_check<F>(f: F, point: &Array, step: f64) -> Result<f64>
where
    F: Fn(&Tape, &DiffArray) -> Result<DiffArray>,
{
    if step <= 0.0 {
        return Err(HctError::InvalidArgument(format!("grad_check step must be positive, got {}", step)));
    }
    let eval = |data: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(Array::new(point.shape().to_vec(), data.to_vec())?)?;
        let loss = f(&tape, &x)?;
        if loss.len() != 1 {
            return Err(HctError::InvalidArgument(format!(
                "grad_check needs a scalar-valued function, got shape {:?}",
                loss.shape()
            )));
        }
        Ok(loss.scalar_value())
    };

    let tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let loss = f(&tape, &x)?;
    if loss.len() != 1 {
        return Err(HctError::InvalidArgument(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    let grads = tape.backward(&loss)?;
    let analytic = grads.wrt(&x).expect("leaf gradient").data().to_vec();

    let mut worst: f64 = 0.0;
    let mut probe = point.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = eval(&probe)?;
        probe[i] = orig - step;
        let down = eval(&probe)?;
        probe[i] = orig;
        let central = (up - down) / (2.0 * step);
        let rel = (analytic[i] - central).abs() / central.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
