//! Finite-difference gradient checker. The oracle is a central difference per
//! input coordinate; it is independent of the tape's backward rules and is
//! what the test suite trusts.

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub num_checked: usize,
    pub tol: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn eval_scalar<F>(f: &F, input: &Tensor) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input);
    let out = f(&mut tape, x)?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.shape(out).to_vec(),
        });
    }
    Ok(tape.value(out)[0])
}

/// Compare the tape gradient of `f` at `input` against central differences.
///
/// Failures are report entries, not errors; relative error uses
/// `|a - n| / max(1, |a|, |n|)` so near-zero gradients are compared
/// absolutely.
pub fn check_gradients<F>(
    f: F,
    input: &Tensor,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let mut leaf = input.clone();
    leaf.requires_grad = true;
    let x = tape.leaf(&leaf);
    let out = f(&mut tape, x)?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.shape(out).to_vec(),
        });
    }
    tape.backward(out)?;
    let analytic = tape.grad_or_zeros(x);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        num_checked: input.numel(),
        tol,
        failures: Vec::new(),
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = input.clone();
        plus.requires_grad = false;
        plus.values_mut()[i] += eps;
        let mut minus = input.clone();
        minus.requires_grad = false;
        minus.values_mut()[i] -= eps;
        let numeric = (eval_scalar(&f, &plus)? - eval_scalar(&f, &minus)?) / (2.0 * eps);
        let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
        }
        if rel > tol {
            report.failures.push(GradCheckFailure {
                index: i,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn polynomial_passes() {
        // f(x) = sum(x^3 - 2x)
        let f = |tape: &mut Tape, x: Var| {
            let x2 = tape.mul(x, x)?;
            let x3 = tape.mul(x2, x)?;
            let lin = tape.scale(x, 2.0);
            let diff = tape.sub(x3, lin)?;
            Ok(tape.sum(diff))
        };
        for seed in 0..3 {
            let mut rng = Rng::new(seed);
            let x = random_tensor(vec![5], &mut rng);
            let report = check_gradients(f, &x, 1e-6, 1e-5).unwrap();
            assert!(report.passed(), "max rel err {}", report.max_rel_error);
        }
    }

    #[test]
    fn softmax_cross_entropy_composition_passes() {
        let f = |tape: &mut Tape, x: Var| {
            let logp = tape.log_softmax_rows(x)?;
            tape.cross_entropy_from_log_probs(logp, &[2, 0])
        };
        let mut rng = Rng::new(9);
        let x = random_tensor(vec![2, 4], &mut rng);
        let report = check_gradients(f, &x, 1e-6, 1e-5).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn corrupted_backward_is_reported_not_thrown() {
        // f(x) = sum(x * stop_gradient(x)): the tape reports d/dx = x while
        // the true derivative is 2x, so every coordinate must fail.
        let f = |tape: &mut Tape, x: Var| {
            let frozen = tape.stop_gradient(x);
            let prod = tape.mul(x, frozen)?;
            Ok(tape.sum(prod))
        };
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = check_gradients(f, &x, 1e-6, 1e-5).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 3);
        assert!(report.max_rel_error > 0.4);
    }
}
