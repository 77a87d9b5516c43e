use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients with central differences.
///
/// `f` builds a scalar on a fresh tape, binding whatever parameters it needs
/// from the store. Every component of every parameter is perturbed by
/// `±eps`; the result is the largest
/// `|analytic − numeric| / max(1, |numeric|)` seen. The store's values are
/// restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(Error::usage(format!(
            "grad_check step must be positive, got {eps}"
        )));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape, store)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::data(format!("objective evaluated to {v}")))
        }
    };

    let mut analytic = ParamStore::new();
    for (_, p) in store.iter() {
        analytic.add(p.name.clone(), super::Tensor::zeros(p.value.shape()))?;
    }
    {
        let tape = Tape::new();
        let root = f(&tape, store)?;
        if !root.item().is_finite() {
            return Err(Error::data("objective is not finite"));
        }
        tape.backward(root)?.accumulate_into(&mut analytic)?;
    }

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).numel() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.grad(id).map_or(0.0, |g| g.data()[k]);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
