//! Finite-difference verification of backward passes.

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares the tape gradient of `f` at `x` against central differences,
/// coordinate by coordinate. Returns the max over coordinates of
/// |a - n| / max(1e-8, |a| + |n|). `f` must be deterministic.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.data.len()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// Like `grad_check` but only probing `max_coords` coordinates sampled from
/// the given stream. Central differences cost two evaluations per
/// coordinate, so exhaustive checks of large parameter tensors are
/// impractical; a fixed random subset keeps end-to-end checks affordable.
pub fn grad_check_sampled<F>(
    f: F,
    x: &Tensor,
    eps: f64,
    max_coords: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut coords: Vec<usize> = (0..x.data.len()).collect();
    if coords.len() > max_coords {
        coords.shuffle(rng);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }
    grad_check_coords(f, x, eps, &coords)
}

fn grad_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    // analytic gradient from one backward pass
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x.clone().with_grad());
        let loss = f(&mut tape, xv)?;
        if tape.value(loss).numel() != 1 {
            return Err(CoreError::Contract("grad_check target must be scalar".into()));
        }
        tape.backward(loss)?;
        tape.grad(xv)
            .ok_or_else(|| CoreError::Contract("loss does not depend on x".into()))?
            .to_vec()
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let t = Tensor::new(x.shape.clone(), data)?;
        let xv = tape.leaf(&t);
        let loss = f(&mut tape, xv)?;
        Ok(tape.value(loss).item())
    };

    let mut max_rel = 0.0f64;
    for &i in coords {
        let mut plus = x.data.clone();
        plus[i] += eps;
        let mut minus = x.data.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_closed_form() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        // analytic gradient is [2, 4, 6]
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum_all(sq)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn rejects_non_scalar_target() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(|tape, v| tape.mul(v, v), &x, DEFAULT_EPS);
        assert!(r.is_err());
    }
}
