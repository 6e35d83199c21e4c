use super::ParamStore;
use crate::error::{Error, Result};

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares analytic gradients with central differences.
///
/// `loss_and_grad` must return the loss for the current parameter values and
/// add its analytic gradient into the store's `grad` fields; grads are zeroed
/// before every call. The relative error of a coordinate is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, mut loss_and_grad: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    let mut eval = |store: &mut ParamStore| -> Result<f64> {
        store.zero_grads();
        let loss = loss_and_grad(store)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("grad_check evaluation produced {loss}")));
        }
        Ok(loss)
    };

    eval(store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<_> = store.names().map(str::to_owned).collect();
    for (pi, name) in ids.iter().enumerate() {
        let id = store.require(name)?;
        for j in 0..store.get(id).value.len() {
            let original = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = original + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = original - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if report.coordinates == 1 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param.clone_from(name);
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    // leave the analytic gradient in place for callers that inspect it
    eval(store)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Graph, Parameter, Tensor};

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        let n = values.len();
        store
            .insert(Parameter::new("p", Tensor::new(vec![n], values).unwrap()))
            .unwrap();
        store
    }

    #[test]
    fn sum_of_params_is_exact() {
        let mut store = store_with(vec![0.3, -1.2, 4.0]);
        let report = grad_check(&mut store, 1e-5, |s| {
            let mut g = Graph::new();
            let p = g.param(s, s.require("p")?);
            let total = g.sum(p);
            g.backward(total)?;
            g.accumulate_param_grads(s)?;
            Ok(g.value(total).data()[0])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn quadratic_matches_two_p() {
        let mut store = store_with(vec![0.7, -2.5, 3.25, 0.0]);
        let report = grad_check(&mut store, 1e-5, |s| {
            let mut g = Graph::new();
            let p = g.param(s, s.require("p")?);
            let sq = g.mul(p, p)?;
            let total = g.sum(sq);
            g.backward(total)?;
            g.accumulate_param_grads(s)?;
            Ok(g.value(total).data()[0])
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
        let grad = &store.by_name("p").unwrap().grad;
        assert_eq!(grad.data(), &[1.4, -5.0, 6.5, 0.0]);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut store = store_with(vec![1.0]);
        let err = grad_check(&mut store, 1e-5, |_| Ok(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(_)));
    }
}
