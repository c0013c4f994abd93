//! Central-difference gradient verification.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Checks the tape gradient of a scalar function of one tensor against
/// central differences over every element.
pub fn finite_diff_check<F>(f: &F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_params(&|t: &mut Tape, vs: &[Var]| f(t, vs[0]), std::slice::from_ref(input), eps, None)
}

/// Multi-input variant. With `max_probes = Some(n)`, at most `n` evenly
/// strided elements per input are probed; otherwise every element is.
pub fn finite_diff_check_params<F>(
    f: &F,
    inputs: &[Tensor],
    eps: f64,
    max_probes: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Autodiff("gradcheck function must be scalar".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = values.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut worst = 0.0f64;
    let mut values: Vec<Tensor> = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let step = match max_probes {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(step) {
            let orig = x.data()[i];
            values[which].data_mut()[i] = orig + eps;
            let plus = eval(&values)?;
            values[which].data_mut()[i] = orig - eps;
            let minus = eval(&values)?;
            values[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(max_rel_error(&[analytic[which].data()[i]], &[numeric]));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn([5], |i| i as f64 * 0.37 - 1.0);
        let err = finite_diff_check(&|t: &mut Tape, v: Var| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // scale by 2 but pretend the gradient is the identity
        let x = Tensor::from_fn([3], |i| i as f64);
        let err = finite_diff_check(
            &|t: &mut Tape, v: Var| {
                let y = t.value(v).map(|a| 2.0 * a);
                let y = t.push(y, &[v], |g, _, _| vec![Some(g.clone())]);
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        // analytic 1 against numeric 2
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }
}
