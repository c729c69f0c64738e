//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::param::ParamStore;
use super::{Result, Tensor, TensorError};

pub const STEP: f64 = 1e-5;
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Elementwise `|a − n| / max(|a|, |n|, 1e-8)`, maximized.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel(a, n))
        .fold(0.0, f64::max)
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR)
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn numeric_gradient(x: &Tensor, step: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    out
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite { index: 0 });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences on every parameter entry.
pub fn grad_check<F>(store: &mut ParamStore, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_sampled(store, f, None)
}

/// As [`grad_check`], but with `Some((k, seed))` only `k` random entries per
/// parameter are probed.
pub fn grad_check_sampled<F>(store: &mut ParamStore, f: F, sampling: Option<(usize, u64)>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if !g.value(out).item().is_finite() {
        return Err(TensorError::NonFinite { index: 0 });
    }
    let grads = g.backward(out)?;
    let mut analytic: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
    for (id, var) in g.bound_params() {
        if let Some(t) = grads.get(var) {
            analytic[id.index()] = t.clone();
        }
    }
    drop(g);

    let mut rng = sampling.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let entries: Vec<usize> = match (&mut rng, sampling) {
            (Some(rng), Some((k, _))) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + STEP;
            let plus = eval(store, &f);
            store.value_mut(id).data_mut()[i] = orig - STEP;
            let minus = eval(store, &f);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * STEP);
            let a = analytic[id.index()].data()[i];
            let e = rel(a, numeric);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Group;

    #[test]
    fn half_squared_norm_is_exact() {
        let mut store = ParamStore::new(4);
        store.add_xavier("w", 3, 5, Group::Rest).unwrap();
        let report = grad_check(&mut store, |g, s| {
            let w = g.param_by_name(s, "w")?;
            let sq = g.mul(w, w)?;
            let sum = g.sum(sq);
            Ok(g.scale(sum, 0.5))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
        assert_eq!(report.checked, 15);
    }

    #[test]
    fn broken_backward_is_detected() {
        let mut store = ParamStore::new(4);
        store.add_xavier("w", 2, 2, Group::Rest).unwrap();
        let report = grad_check(&mut store, |g, s| {
            let w = g.param_by_name(s, "w")?;
            let value = g.value(w).map(|x| x * x);
            // Deliberately wrong: claims d(x²)/dx = x.
            let wv = g.value(w).clone();
            let sq = g.custom(&[w], value, move |up| {
                vec![Tensor::new(wv.shape(), up.data().iter().zip(wv.data()).map(|(u, x)| u * x).collect()).unwrap()]
            });
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new(0);
        store.add_tensor("w", Tensor::vector(&[f64::NAN]), Group::Rest).unwrap();
        let r = grad_check(&mut store, |g, s| {
            let w = g.param_by_name(s, "w")?;
            Ok(g.sum(w))
        });
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn sampling_limits_probes() {
        let mut store = ParamStore::new(1);
        store.add_xavier("w", 6, 6, Group::Rest).unwrap();
        let report = grad_check_sampled(
            &mut store,
            |g, s| {
                let w = g.param_by_name(s, "w")?;
                let t = g.tanh(w);
                Ok(g.sum(t))
            },
            Some((5, 9)),
        )
        .unwrap();
        assert_eq!(report.checked, 5);
        assert!(report.max_rel_error < 1e-6);
    }
}
