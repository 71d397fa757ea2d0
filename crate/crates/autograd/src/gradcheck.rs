//! Central-difference gradient checks.
//!
//! The relative error of one coordinate is
//! `|analytic - numeric| / (|analytic| + |numeric| + FLOOR)`; `FLOOR` keeps
//! coordinates whose true gradient is zero from amplifying round-off.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + FLOOR)
}

fn eval_scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar, got {:?}", t.dims())));
    }
    Ok(t.item())
}

/// Checks the gradient of `f` with respect to its input at `x`, over every
/// coordinate. `f` builds its computation on the graph it is handed and
/// must be deterministic.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new(false);
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |xp: Tensor| -> Result<f64> {
        let mut g = Graph::new(false);
        let v = g.input(xp);
        let out = f(&mut g, v)?;
        eval_scalar(&g, out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let fp = eval(xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fm = eval(xm)?;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct ParamCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub coordinates_checked: usize,
}

/// Checks parameter gradients of a scalar-valued model function.
///
/// `f` receives a fresh graph and the (possibly perturbed) store. At most
/// `per_param` randomly chosen coordinates of each parameter are probed, or
/// all of them when `per_param` is `None`. Parameters that do not reach the
/// output are skipped. `f` may use `rng`-free randomness only if it reseeds
/// identically on every call.
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    f: F,
    h: f64,
    per_param: Option<usize>,
    rng: &mut RngStream,
) -> Result<ParamCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_selected_param_gradients(store, f, h, per_param, rng, |_| true)
}

/// Like [`check_param_gradients`], probing only parameters whose name
/// satisfies `select`.
pub fn check_selected_param_gradients<F, S>(
    store: &mut ParamStore,
    f: F,
    h: f64,
    per_param: Option<usize>,
    rng: &mut RngStream,
    select: S,
) -> Result<ParamCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    S: Fn(&str) -> bool,
{
    let mut g = Graph::new(true);
    let out = f(&mut g, store)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out)?;
    let mut report =
        ParamCheckReport { max_relative_error: 0.0, worst_param: String::new(), coordinates_checked: 0 };
    let ids: Vec<ParamId> = grads.params().keys().copied().filter(|&id| select(store.name(id))).collect();
    for id in ids {
        let analytic = grads.param(id).unwrap().to_vec();
        let n = analytic.len();
        let coords = match per_param {
            Some(k) if k < n => rng.choose_distinct(n, k),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let mut gp = Graph::new(true);
            let op = f(&mut gp, store)?;
            let fp = eval_scalar(&gp, op)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let mut gm = Graph::new(true);
            let om = f(&mut gm, store)?;
            let fm = eval_scalar(&gm, om)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            report.coordinates_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = format!("{}[{i}]", store.name(id));
            }
        }
    }
    Ok(report)
}
