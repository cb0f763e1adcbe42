use super::Derl;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Parameters used at inference time (everything but reconstruction).
    pub inference: usize,
    /// `(group, count)` in model construction order.
    pub modules: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn module(&self, name: &str) -> usize {
        self.modules.iter().find(|(n, _)| n == name).map_or(0, |(_, c)| *c)
    }
}

fn group(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    match (first, parts.next()) {
        ("head", _) | (_, None) => first.to_string(),
        (_, Some("log_tau")) => format!("{first}.temperature"),
        (_, Some(second)) => format!("{first}.{second}"),
    }
}

/// Exact parameter counts by module group, e.g. `encoder.proj`,
/// `hed.shared`, `mlcr.joint`, `mrf.fusion`, `head`.
pub fn count_params<T: Scalar>(model: &Derl<T>) -> ParamCount {
    let mut modules: Vec<(String, usize)> = Vec::new();
    for (_, name, t) in model.store.iter() {
        let g = group(name);
        match modules.iter_mut().find(|(n, _)| *n == g) {
            Some((_, c)) => *c += t.numel(),
            None => modules.push((g, t.numel())),
        }
    }
    let total = modules.iter().map(|(_, c)| c).sum();
    let recon: usize = modules.iter().filter(|(n, _)| n.starts_with("mlcr.")).map(|(_, c)| c).sum();
    ParamCount {
        total,
        inference: total - recon,
        modules,
    }
}
