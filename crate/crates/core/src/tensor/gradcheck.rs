use super::{Graph, ParamStore, Result, TensorError, Var};
use crate::Scalar;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-5)`. A 1e-5
    /// central difference of an O(10) f64 loss carries about 1e-10 of
    /// round-off, so smaller gradients cannot be resolved to 1e-4.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

const REL_FLOOR: f64 = 1e-5;

/// Compares reverse-mode gradients of `f` against central differences with
/// the given `step` for every entry of every parameter in `store`.
///
/// `f` builds a scalar loss on a graph that has `store` bound; it must be
/// deterministic. Forward ops are checked for non-finite values, so a
/// diverging function surfaces as [`TensorError::NonFinite`] naming the node.
pub fn grad_check<T, F>(store: &ParamStore<T>, mut f: F, step: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::Domain {
            op: "grad_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let mut g = Graph::with_params(store);
    g.set_check_finite(true);
    let loss = f(&mut g)?;
    g.backward(loss)?;
    let analytic = g.param_grads();
    drop(g);

    let mut probe = store.clone();
    let mut eval = |p: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::inference_with_params(p);
        g.set_check_finite(true);
        let loss = f(&mut g)?;
        g.value(loss)
            .item()
            .map(Scalar::to_f64_lossy)
            .ok_or_else(|| TensorError::NonScalarLoss {
                shape: g.shape(loss).to_vec(),
            })
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let h = T::lit(step);
    for id in store.ids() {
        for idx in 0..store.get(id).numel() {
            let orig = probe.get(id).data()[idx];
            probe.get_mut(id).data_mut()[idx] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[idx] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[idx] = orig;
            // the realized step differs from `step` in f32
            let realized = ((orig + h) - (orig - h)).to_f64_lossy();
            let numeric = (fp - fm) / realized;
            let a = analytic[id.index()].data()[idx].to_f64_lossy();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst_param = store.name(id).to_string();
                    report.worst_index = idx;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
