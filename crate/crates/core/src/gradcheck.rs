//! Central finite-difference checks of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::data::{Conversation, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Mat, ParamId, ParamStore};
use crate::training::batch_objective;

/// Denominator floor of the relative error, so that gradients that are
/// zero up to rounding do not divide by zero.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest absolute analytic gradient entry, to show the tensor was reached.
    pub max_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` (one matrix per listed parameter) with central
/// differences of `loss` at the given step.
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    analytic: &[Mat],
    step: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut tensors = Vec::with_capacity(params.len());
    for (&id, grad) in params.iter().zip(analytic) {
        let shape = store.value(id).dim();
        if grad.dim() != shape {
            return Err(Error::InvalidInput(format!(
                "gradient for {} has shape {:?}, parameter has {shape:?}",
                store.name(id),
                grad.dim()
            )));
        }
        let mut check = TensorCheck {
            name: store.name(id).to_string(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_grad: grad.iter().fold(0.0, |m, g| m.max(g.abs())),
        };
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store.value(id)[[r, c]];
                store.value_mut(id)[[r, c]] = orig + step;
                let up = loss(store);
                store.value_mut(id)[[r, c]] = orig - step;
                let down = loss(store);
                store.value_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = grad[[r, c]];
                if !numeric.is_finite() || !a.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "non-finite gradient for {}[{r},{c}]: analytic {a}, numeric {numeric}",
                        check.name
                    )));
                }
                check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
                check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors })
}

/// Checks every parameter tensor of `model` against the joint loss on all
/// turns of `data` (no dropout, gold history).
pub fn gradient_check(model: &Model, data: &Dataset, alpha: f64, beta: f64, step: f64) -> Result<GradCheckReport> {
    let convs: Vec<&Conversation> = data.conversations.iter().collect();
    let mut g = Graph::new();
    let loss = batch_objective(model, &mut g, &convs, alpha, beta, None)?;
    let grads = g.backward(loss.total);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let analytic: Vec<Mat> = ids
        .iter()
        .map(|&id| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Mat::zeros(model.store.value(id).dim()))
        })
        .collect();
    let mut probe = model.clone();
    let mut store = model.store.clone();
    compare_gradients(&mut store, &ids, &analytic, step, |s| {
        probe.store = s.clone();
        let mut g = Graph::new();
        let total = batch_objective(&probe, &mut g, &convs, alpha, beta, None).map(|l| g.scalar(l.total));
        total.unwrap_or(f64::NAN)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn linear_setup() -> (ParamStore, ParamId, Mat, Mat) {
        let mut store = ParamStore::new();
        let w = store.insert("w", array![[0.3, -1.2], [2.0, 0.5], [-0.7, 0.1]]);
        let x = array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]];
        let c = array![[1.5, -2.0], [0.25, 4.0]];
        (store, w, x, c)
    }

    fn linear_loss(store: &ParamStore, w: ParamId, x: &Mat, c: &Mat) -> (f64, Mat) {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let cn = g.constant(c.clone());
        let wn = g.param(store, w);
        let y = g.matmul(xn, wn);
        let prod = g.mul(y, cn);
        let ones = g.constant(Mat::ones((1, 2)));
        let ones_r = g.constant(Mat::ones((2, 1)));
        let s = g.matmul(ones, prod);
        let s = g.matmul(s, ones_r);
        let grads = g.backward(s);
        (g.scalar(s), grads.param(w).unwrap().clone())
    }

    #[test]
    fn linear_map_is_exact() {
        let (mut store, w, x, c) = linear_setup();
        let (_, grad) = linear_loss(&store, w, &x, &c);
        let report = compare_gradients(&mut store, &[w], &[grad], 1e-4, |s| linear_loss(s, w, &x, &c).0).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (mut store, w, x, c) = linear_setup();
        let (_, mut grad) = linear_loss(&store, w, &x, &c);
        grad[[1, 0]] *= 1.1;
        let report = compare_gradients(&mut store, &[w], &[grad], 1e-4, |s| linear_loss(s, w, &x, &c).0).unwrap();
        assert!(report.max_rel_error() > 1e-2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut store, w, _, _) = linear_setup();
        assert!(compare_gradients(&mut store, &[w], &[Mat::zeros((1, 1))], 1e-4, |_| 0.0).is_err());
    }
}
