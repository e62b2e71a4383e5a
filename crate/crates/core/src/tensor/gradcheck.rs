use super::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = f(&tape, v)?;
    tape.check_finite()?;
    Ok(tape.scalar(y))
}

/// Fourth-order central difference from evaluations at offsets ±h, ±2h.
fn stencil(h: f64, mut at: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p1, m1) = (at(h)?, at(-h)?);
    let (p2, m2) = (at(2.0 * h)?, at(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Max relative error between the reverse-mode gradient of `f` at `x` and
/// fourth-order central differences with step `eps`, using
/// `|a - n| / max(|a|, |n|, 1e-8)` per element.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let y = f(&tape, v)?;
    let grads = tape.backward(y)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.get(v).unwrap_or(&zeros).to_vec();
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.values()[i];
        let numeric = stencil(eps, |h| {
            probe.values_mut()[i] = orig + h;
            eval(&f, &probe)
        })?;
        probe.values_mut()[i] = orig;
        if !numeric.is_finite() {
            return Err(Error::NonFinite { op: "central difference".into() });
        }
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`] but over every trainable parameter of `store`.
pub fn grad_check_params<F>(f: F, store: &mut ParamStore<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Bound) -> Result<Var>,
{
    let run = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let b = store.bind(&tape);
        let y = f(&tape, &b)?;
        tape.check_finite()?;
        Ok(tape.scalar(y))
    };
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let y = f(&tape, &bound)?;
    let grads = tape.backward(y)?;
    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.value(id).numel();
        let zeros = vec![0.0; n];
        let analytic = grads.get(bound.var(id)).unwrap_or(&zeros).to_vec();
        for i in 0..n {
            let orig = store.value(id).values()[i];
            let numeric = stencil(eps, |h| {
                store.value_mut(id).values_mut()[i] = orig + h;
                run(store)
            });
            store.value_mut(id).values_mut()[i] = orig;
            let numeric = numeric?;
            if !numeric.is_finite() {
                return Err(Error::NonFinite { op: "central difference".into() });
            }
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -4.0, 2.0, 7.5, 0.0, 1.0]).unwrap();
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::from_vec(vec![-1.0, 2.0]);
        let r = grad_check(|t, x| Ok(t.sum(t.log(x))), &x, 1e-6);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
