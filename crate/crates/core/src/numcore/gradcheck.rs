use super::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Checks the gradients of a scalar function of `store` by central differences.
///
/// `f` must build the same computation for any parameter values.
pub fn finite_diff_check<F>(f: F, store: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    finite_diff_check_params(f, store, eps, &store.ids().collect::<Vec<_>>())
}

/// Same as [`finite_diff_check`] but perturbs only the listed parameters.
pub fn finite_diff_check_params<F>(f: F, store: &ParamStore, eps: f64, params: &[ParamId]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Invalid(format!("finite-difference step {eps} outside [1e-7, 1e-4]")));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check objective"));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let analytic = g.backward(out)?;

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: None, worst_index: 0, coordinates: 0 };
    for &id in params {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[k]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_param = Some(store.name(id).to_string());
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(vec![0.5, -1.5, 2.0])).unwrap();
        let r = finite_diff_check(
            |g, s| {
                let w = g.param(s, s.id("w").unwrap())?;
                let sq = g.mul(w, w)?;
                g.sum(sq)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let r = finite_diff_check(
            |g, _| {
                let c = g.constant(Tensor::scalar(4.0))?;
                g.sum(c)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn step_out_of_range_rejected() {
        let store = ParamStore::new();
        let f = |g: &mut Graph, _: &ParamStore| g.constant(Tensor::scalar(0.0));
        assert!(finite_diff_check(f, &store, 1e-3).is_err());
        assert!(finite_diff_check(f, &store, 1e-9).is_err());
    }

    #[test]
    fn non_finite_objective_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        let r = finite_diff_check(|g, _| g.constant(Tensor::scalar(f64::NAN)), &store, 1e-5);
        assert!(r.is_err());
    }
}
