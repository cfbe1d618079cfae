use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a ±epsilon perturbation crossed a kink.
    pub excluded: usize,
}

/// Compares the reverse-mode gradient of `f` at `x` with central
/// differences.
///
/// `f` builds its graph on the tape it is given, reading `x` through the
/// supplied variable, and returns a scalar. Coordinates whose perturbation
/// changes the tape's branch signature (relu masks, hinge activations) are
/// excluded: the finite difference there does not estimate the one-sided
/// derivative the engine reports.
pub fn grad_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::GradCheck(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }

    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let root = f(&mut tape, input)?;
    let signature = tape.branch_signature();
    let grads = tape.backward(root)?;
    let analytic = grads
        .get(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |point: &Tensor| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let input = tape.param(point.clone());
        let root = f(&mut tape, input)?;
        let value = tape.value(root).item()?;
        if !value.is_finite() {
            return Err(Error::GradCheck(format!("function is non-finite ({value}) at a perturbed point")));
        }
        Ok((value, tape.branch_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    let mut point = x.clone();
    for i in 0..x.len() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + epsilon;
        let (plus, sig_plus) = eval(&point)?;
        point.data_mut()[i] = orig - epsilon;
        let (minus, sig_minus) = eval(&point)?;
        point.data_mut()[i] = orig;

        if sig_plus != signature || sig_minus != signature {
            report.excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact() {
        let report = grad_check(
            |tape, x| {
                let y = tape.mul(x, x)?;
                Ok(tape.sum_all(y))
            },
            &Tensor::from_vec(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let report = grad_check(
            |tape, x| {
                let y = tape.relu(x);
                Ok(tape.sum_all(y))
            },
            &Tensor::from_vec(vec![0.0, 1.5, -2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(report.excluded, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error < 1e-10);
    }

    #[test]
    fn epsilon_range_enforced() {
        let f = |tape: &mut Tape, x: Var| Ok(tape.sum_all(x));
        assert!(grad_check(f, &Tensor::from_vec(vec![1.0]), 1e-2).is_err());
        assert!(grad_check(f, &Tensor::from_vec(vec![1.0]), 1e-9).is_err());
    }

    #[test]
    fn non_finite_perturbation_is_an_error() {
        // log at 1e-6 perturbed by 1e-5 leaves the domain.
        let result = grad_check(
            |tape, x| {
                let y = tape.log(x)?;
                Ok(tape.sum_all(y))
            },
            &Tensor::from_vec(vec![1e-6]),
            1e-5,
        );
        assert!(result.is_err());
    }
}
