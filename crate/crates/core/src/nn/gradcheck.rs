//! Central finite-difference check of analytic parameter gradients.

use super::{Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at `worst`.
    pub worst_values: (f64, f64),
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward-pass gradient of every parameter entry (or the
/// first `max_per_param` entries of each parameter, evenly strided) with
/// `(f(w + eps) - f(w - eps)) / (2 eps)`.
///
/// `build` must construct the same deterministic graph on every call and
/// return its scalar loss.
pub fn check<F>(store: &mut ParamStore, eps: f64, max_per_param: Option<usize>, build: F) -> GradCheckReport
where
    F: FnMut(&ParamStore, &mut Graph) -> Var,
{
    check_with_floor(store, eps, max_per_param, 1e-6, build)
}

/// [`check`] with an explicit denominator floor for the relative error, for
/// graphs whose exact gradients include entries that are identically zero
/// (e.g. attention key biases, to which softmax is invariant).
pub fn check_with_floor<F>(
    store: &mut ParamStore,
    eps: f64,
    max_per_param: Option<usize>,
    floor: f64,
    mut build: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore, &mut Graph) -> Var,
{
    let mut g = Graph::new(false, 0);
    let loss = build(store, &mut g);
    g.backward(loss);
    let analytic: Vec<(super::ParamId, Vec<f64>)> = store
        .ids()
        .map(|id| {
            let n = store.value(id).len();
            let grad = g
                .param_grads()
                .filter(|(pid, _)| *pid == id)
                .fold(vec![0.0; n], |mut acc, (_, gr)| {
                    acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    acc
                });
            (id, grad)
        })
        .collect();

    let mut eval = |store: &ParamStore| {
        let mut g = Graph::new(false, 0);
        let l = build(store, &mut g);
        g.scalar(l)
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
    };
    for (id, grad) in analytic {
        let n = grad.len();
        let stride = max_per_param.map_or(1, |m| (n / m.max(1)).max(1));
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data[i];
            store.value_mut(id).data[i] = orig + eps;
            let fp = eval(store);
            store.value_mut(id).data[i] = orig - eps;
            let fm = eval(store);
            store.value_mut(id).data[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = relative_error(grad[i], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
                report.worst_values = (grad[i], numeric);
            }
        }
    }
    report
}
