//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use alloc::vec::Vec;

/// Compares tape gradients of a scalar map against central differences
/// `(f(x+h·e_i) − f(x−h·e_i)) / 2h` and returns the largest relative error,
/// using `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn check_gradient<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: alloc::vec::Vec<usize> = (0..x.len()).collect();
    check_gradient_at(f, x, step, &all)
}

/// Like [`check_gradient`] but only probes the listed coordinates.
pub fn check_gradient_at<F>(f: F, x: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let analytic = tape.backward(out)?.wrt(&tape, leaf);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe.clone());
        let o = f(&mut t, v)?;
        t.value(o).item()
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of parameter gradients. `f` builds a scalar loss
/// from the store; `coords` lists `(parameter, flat index)` probes.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    f: F,
    step: f64,
    coords: &[(ParamId, usize)],
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    Ok(param_gradient_pairs(store, f, step, coords)?
        .into_iter()
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(analytic, numeric)` derivative for every probe in `coords`.
pub fn param_gradient_pairs<F>(
    store: &ParamStore,
    f: F,
    step: f64,
    coords: &[(ParamId, usize)],
) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let analytic = tape.param_grads(&grads, store);

    let mut probe = store.clone();
    let eval = |probe: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let o = f(&mut t, probe)?;
        t.value(o).item()
    };
    let mut pairs = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        pairs.push((analytic[id.0].data()[i], (plus - minus) / (2.0 * step)));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use rand::Rng as _;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn linear_sum_is_exact() {
        let x = random(&[5], 1);
        let err = check_gradient(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn softmax_then_dot() {
        let x = random(&[6], 2);
        let w = random(&[6], 3).into_data();
        let err = check_gradient(
            |t, v| {
                let s = t.softmax(v, 0)?;
                let p = t.mul_const(s, w.clone())?;
                Ok(t.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}
