//! Central finite-difference oracle for the autodiff engine.

use std::rc::Rc;

use rand::seq::index::sample;

use super::{Graph, NdArray, Tensor};
use crate::error::{contract, Error, Result};
use crate::rng;

/// Step used by every gradient check in the crate.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Max over entries of `|analytic - numeric| / max(1, |analytic|)` for a
/// scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &NdArray, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    finite_diff_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), eps, None, 0)
}

/// Same as [`finite_diff_check`] over several inputs. With `max_entries`,
/// each input is probed at a seeded random subset of that many entries.
pub fn finite_diff_check_many<F>(
    f: F,
    xs: &[NdArray],
    eps: f64,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return contract(format!("finite-difference step must be positive, got {eps}"));
    }
    // Detached values are frozen at the unperturbed point, matching what
    // backpropagation treats as constant.
    let g = Graph::recording_stops(0);
    let leaves: Vec<Tensor> = xs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = f(&leaves)?;
    let grads = loss.backward()?;
    let stops = Rc::new(g.recorded_stops());
    let eval = |inputs: &[NdArray]| -> Result<f64> {
        let g = Graph::replaying_stops(0, stops.clone());
        let leaves: Vec<Tensor> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        f(&leaves)?.value().item()
    };

    let base = loss.value().item()?;
    let again = eval(xs)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "repeated evaluation differs: {base:e} vs {again:e}"
        )));
    }

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf);
        let n = xs[k].len();
        let entries: Vec<usize> = match max_entries {
            Some(m) if m < n => {
                let mut r = rng::stream(seed, k as u64);
                sample(&mut r, n, m).into_vec()
            }
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = xs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::OracleInvalid(format!("non-finite probe at input {k}[{i}]")));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = NdArray::from_vec(vec![1.0, 2.0, 3.0]);
        let err = finite_diff_check(|x| Ok(x.square()?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = NdArray::from_vec(vec![1.0]);
        let res = finite_diff_check(
            |x| {
                calls.set(calls.get() + 1.0);
                x.add_scalar(calls.get()).map(|t| t.sum())
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(Error::OracleInvalid(_))));
    }

    #[test]
    fn rejects_bad_step() {
        let x = NdArray::from_vec(vec![1.0]);
        assert!(finite_diff_check(|x| Ok(x.sum()), &x, 0.0).is_err());
    }
}
