//! Central finite-difference checking of parameter gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// `|a - b| / max(1, |a|, |b|)`: relative for large values, absolute near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compare the analytic gradient of `loss_fn` against central differences
/// with step `h` for every scalar of the listed parameters (all when `None`).
pub fn check_gradients<F>(store: &mut ParamStore, h: f64, only: Option<&[ParamId]>, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss, store)?;
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for id in ids {
        let analytic = store.grad(id).data().to_vec();
        let frozen = store.frozen_rows(id).to_vec();
        let cols = store.value(id).shape().last().copied().unwrap_or(1);
        for (k, &a) in analytic.iter().enumerate() {
            if frozen.contains(&(k / cols)) {
                continue;
            }
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                if e >= report.max_rel_err {
                    report.worst = Some((store.name(id).to_string(), k, a, numeric));
                }
            }
        }
    }
    store.zero_grads();
    Ok(report)
}
