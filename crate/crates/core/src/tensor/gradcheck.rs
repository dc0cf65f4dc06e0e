//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Max over all coordinates of `|analytic - numeric| / max(1, |analytic|)`,
/// where `numeric` is the central difference with step `h`.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..input.numel()).collect();
    check_coords(&f, input, h, &coords)
}

/// Like [`grad_check`] but only probes `max_coords` coordinates chosen with
/// `seed`; for inputs too large to perturb one by one.
pub fn grad_check_sampled<F>(f: F, input: &Tensor, h: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let n = input.numel();
    let coords = if max_coords >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, n, max_coords).into_vec();
        picked.sort_unstable();
        picked
    };
    check_coords(&f, input, h, &coords)
}

fn eval<F>(f: &F, input: Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let out = f(&mut tape, x)?;
    scalar(&tape, out)
}

fn scalar(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function must be scalar-valued, got shape {:?}", v.shape()),
        ));
    }
    Ok(v.data()[0])
}

fn check_coords<F>(f: &F, input: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("grad_check", format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().with_requires_grad(true));
    let out = f(&mut tape, x)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(f, plus)? - eval(f, minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
