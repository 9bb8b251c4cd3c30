//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Which elements of each input get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many elements per input, chosen by a seeded generator.
    Sampled { per_input: usize, seed: u64 },
}

/// Max relative error per input, `|a − n| / max(1, |a|)`, where `a` is the
/// analytic gradient and `n = (f(x+h) − f(x−h)) / 2h`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, inputs, h, Coverage::All)
}

pub fn gradcheck_with<F>(f: F, inputs: &[Tensor<f64>], h: f64, coverage: Coverage) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(contract("gradcheck: inputs must be finite"));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(contract("gradcheck: function must return a scalar"));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    let grads = tape.backward(out)?;

    let again = eval(inputs)?;
    if again.to_bits() != base.to_bits() {
        return Err(contract("gradcheck: function is not deterministic"));
    }

    let mut errors = Vec::with_capacity(inputs.len());
    let mut xs = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let n = inputs[k].numel();
        let elems: Vec<usize> = match coverage {
            Coverage::Sampled { per_input, seed } if per_input < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
                let mut v = sample(&mut rng, n, per_input).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for e in elems {
            let orig = xs[k].data()[e];
            xs[k].data_mut()[e] = orig + h;
            let plus = eval(&xs)?;
            xs[k].data_mut()[e] = orig - h;
            let minus = eval(&xs)?;
            xs[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        errors.push(worst);
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_is_exact() {
        let x = Tensor::scalar(2.0);
        let y = Tensor::scalar(3.0);
        let errs = gradcheck(|t, v| t.mul(v[0], v[1]), &[x, y], DEFAULT_STEP).unwrap();
        assert!(errs.iter().all(|&e| e < 1e-9), "{errs:?}");
    }

    #[test]
    fn exp_at_zero() {
        let errs = gradcheck(|t, v| t.exp(v[0]), &[Tensor::scalar(0.0)], DEFAULT_STEP).unwrap();
        assert!(errs[0] < 1e-9);
    }

    #[test]
    fn nondeterminism_is_reported() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let res = gradcheck(
            |t, v| {
                calls.set(calls.get() + 1.0);
                let c = t.constant(Tensor::scalar(calls.get()));
                t.mul(v[0], c)
            },
            &[Tensor::scalar(1.0)],
            DEFAULT_STEP,
        );
        assert!(res.is_err());
    }
}
