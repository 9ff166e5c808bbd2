//! Central finite-difference checking of tape gradients.
//!
//! The analytic side runs one backward pass over `sum(output * R)` with a
//! fixed random projection `R`; the numeric side re-evaluates the forward
//! closure with each input coordinate nudged by `±eps` and contracts the
//! output with the same `R` in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`, with 0 when both are
/// (numerically) zero.
pub fn relative_error(analytic: &[Real], numeric: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = f64::from(a);
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Central difference of `f` with respect to every entry of `values`.
pub fn numeric_gradient(values: &mut [Real], eps: Real, mut f: impl FnMut(&[Real]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    for j in 0..values.len() {
        let orig = values[j];
        values[j] = orig + eps;
        let plus = f(values)?;
        values[j] = orig - eps;
        let minus = f(values)?;
        values[j] = orig;
        // Divide by the perturbation actually representable in `Real`.
        let h = f64::from(orig + eps) - f64::from(orig - eps);
        out.push((plus - minus) / h);
    }
    Ok(out)
}

/// Checks `build` at `inputs`; returns the relative error for each input.
pub fn check<F>(inputs: &[Tensor], eps: Real, seed: u64, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let numel: usize = out_shape.iter().product();
    let projection: Vec<Real> = if numel == 1 {
        vec![1.0]
    } else {
        (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let r = tape.constant(Tensor::new(out_shape, projection.clone())?);
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod, None)?;
    tape.backward(loss)?;

    let evaluate = |current: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = current.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        Ok(t
            .value(o)
            .data()
            .iter()
            .zip(&projection)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum())
    };

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(<[Real]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut current: Vec<Tensor> = inputs.to_vec();
        let mut values = current[i].data().to_vec();
        let numeric = numeric_gradient(&mut values, eps, |vals| {
            current[i].data_mut().copy_from_slice(vals);
            evaluate(&current)
        })?;
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}
