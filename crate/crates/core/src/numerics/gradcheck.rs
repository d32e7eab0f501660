use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Scalar-valued function of some tensors, recorded on a tape.
pub trait ScalarFn: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> {}
impl<F> ScalarFn for F where F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> {}

fn evaluate(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value().data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("grad_check: f evaluated to {v}")));
    }
    Ok(v)
}

fn analytic(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get_or_zeros(v)).collect())
}

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
pub fn grad_check(f: impl ScalarFn, inputs: &[Tensor], eps: f64) -> Result<f64> {
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_coords(&f, inputs, eps, &all)
}

/// Like [`grad_check`] but probes at most `per_input` random coordinates of each input.
pub fn grad_check_sampled<R: Rng + ?Sized>(
    f: impl ScalarFn,
    inputs: &[Tensor],
    eps: f64,
    per_input: usize,
    rng: &mut R,
) -> Result<f64> {
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.len() <= per_input {
                (0..t.len()).collect()
            } else {
                let mut idx = sample(rng, t.len(), per_input).into_vec();
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    check_coords(&f, inputs, eps, &coords)
}

fn check_coords(
    f: &impl ScalarFn,
    inputs: &[Tensor],
    eps: f64,
    coords: &[Vec<usize>],
) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::param(format!(
            "grad_check: eps {eps} outside [1e-7, 1e-4]"
        )));
    }
    let grads = analytic(f, inputs)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, idxs) in coords.iter().enumerate() {
        for &j in idxs {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = evaluate(f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = evaluate(f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[i].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
