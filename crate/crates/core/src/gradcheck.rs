//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Below this magnitude a gradient entry is compared in absolute terms;
/// central differences cannot resolve relative error much further down.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of `loss` against central differences for
/// every entry of `params`, returning the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
///
/// `loss` must be deterministic for a fixed store: dropout masks are sampled
/// outside and captured by the closure.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    mut loss: F,
) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let analytic = {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        check_finite(g.value(l).data()[0])?;
        g.backward(l)?
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        let v = g.value(l).item().ok_or_else(|| Error::Numeric("loss is not a scalar".into()))?;
        check_finite(v)
    };

    let mut worst: f64 = 0.0;
    for &id in params {
        let n = store.get(id).len();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            check_finite(a)?;
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite value {v} during gradient check")))
    }
}
