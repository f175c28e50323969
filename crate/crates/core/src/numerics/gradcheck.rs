use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Trace, Var};

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences for every entry of `params`.
///
/// Returns the maximum of `|analytic - numeric| / max(1, |numeric|)`.
/// Existing gradients of the checked parameters are cleared.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Trace, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("grad_check step must be positive, got {step}")));
    }
    for &id in params {
        store.get_mut(id).zero_grad();
    }
    let mut tr = Trace::new();
    let loss = f(&mut tr, store)?;
    tr.backward(loss, store)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tr = Trace::new();
        let v = f(&mut tr, store)?;
        let out = tr.value(v);
        if !out.is_scalar() {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        let x = out.item();
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(x)
    };

    let mut worst: f64 = 0.0;
    for &id in params {
        let analytic: Vec<f64> = match store.get(id).grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; store.get(id).numel()],
        };
        for (i, a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
