use crate::tensor::{Graph, Result, TensorError, Var};
use crate::Scalar;

/// Mean squared error between `[B]` predictions and labels.
pub fn task_loss<T: Scalar>(g: &mut Graph<T>, prediction: Var, labels: Var) -> Result<Var> {
    if g.value(prediction).numel() == 0 {
        return Err(TensorError::Domain {
            op: "task_loss",
            reason: "empty batch".into(),
        });
    }
    g.sq_l2_distance(prediction, labels)
}

/// `w0 * task + w1 * dec + w2 * rec`; unit weights give the plain sum.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, task: Var, dec: Var, rec: Var, weights: [f64; 3]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, w) in [task, dec, rec].into_iter().zip(weights) {
        let t = if w == 1.0 { term } else { g.scale(term, T::lit(w))? };
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(acc.expect("three terms"))
}
