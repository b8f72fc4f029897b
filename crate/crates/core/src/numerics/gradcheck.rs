use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{RaplError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely: the relative error
/// denominator is floored here, so `rel ≤ tol` becomes `abs ≤ tol·0.01`.
const NEAR_ZERO: f64 = 0.01;

const COTANGENT_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
    pub tolerance: f64,
    pub coordinates: usize,
}

/// Evaluates `op` on fresh leaves and reduces a non-scalar output with a
/// fixed random cotangent.
fn evaluate<F>(op: &F, inputs: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves = inputs
        .iter()
        .map(|t| if track { tape.param(t) } else { tape.constant(t) })
        .collect::<Result<Vec<_>>>()?;
    let out = op(&mut tape, &leaves)?;
    let numel = tape.value(out).numel();
    let out = if numel == 1 {
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(COTANGENT_SEED);
        let weights = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.contract(out, weights)?
    };
    Ok((tape, leaves, out))
}

/// Compares the tape gradient of `op` with central finite differences over
/// every coordinate of every input.
pub fn grad_check<F>(op_name: &str, op: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, leaves, out) = evaluate(&op, inputs, true)?;
    let grads = tape.backward(out)?;

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut coordinates = 0;
    let mut work = inputs.to_vec();
    for (slot, leaf) in leaves.iter().enumerate() {
        let analytic = grads.tensor(*leaf);
        if !analytic.is_finite() {
            return Err(RaplError::GradCheck {
                op: op_name.to_string(),
                detail: format!("non-finite analytic gradient for input {slot}"),
            });
        }
        for i in 0..inputs[slot].numel() {
            let orig = inputs[slot].data()[i];
            work[slot].data_mut()[i] = orig + FD_STEP;
            let (tp, _, op_) = evaluate(&op, &work, false)?;
            let plus = tp.value(op_).item();
            work[slot].data_mut()[i] = orig - FD_STEP;
            let (tm, _, om) = evaluate(&op, &work, false)?;
            let minus = tm.value(om).item();
            work[slot].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(NEAR_ZERO);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            coordinates += 1;
        }
    }
    let passed = max_rel <= tolerance || max_abs <= tolerance * NEAR_ZERO;
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        passed,
        tolerance,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_closed_form() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&x).unwrap();
        let v2 = tape.reshape(v, &[1, 3]).unwrap();
        let vt = tape.transpose(v2).unwrap();
        let sq = tape.matmul(v2, vt).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[2.0, 4.0, 6.0]);

        let report = grad_check(
            "sum_sq",
            |t, xs| {
                let r = t.reshape(xs[0], &[1, 3])?;
                let rt = t.transpose(r)?;
                t.matmul(r, rt)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly 0 has a one-sided derivative; the tape reports 0
        // while central differences see 0.5.
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let report = grad_check("relu_kink", |t, xs| t.relu(xs[0]), &[x], 1e-4).unwrap();
        assert!(!report.passed);
    }
}
