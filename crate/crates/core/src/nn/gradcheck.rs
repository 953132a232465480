//! Central finite-difference verification of recorded adjoints.

use super::{Graph, ParamStore, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, element)` positions where a NaN appeared.
    pub nan_at: Vec<(usize, usize)>,
}

/// Relative error with a floor proportional to the gradient scale, so that
/// entries that are zero up to round-off do not dominate.
fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let floor = 1e-7 + 1e-6 * scale;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).data()[0]
}

/// Compares analytic input gradients of the scalar `f` with central
/// differences of step `eps`. Returns the maximum relative error.
pub fn grad_check(f: impl Fn(&mut Graph<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>], eps: f64) -> f64 {
    grad_check_report(&f, inputs, eps, usize::MAX).max_rel_error
}

pub fn grad_check_report(
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_per_input: usize,
) -> GradReport {
    let mut g = Graph::new(false);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let scale = analytic.iter().map(|t| t.max_abs()).fold(0.0, f64::max);

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in sample_positions(a.numel(), max_per_input) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = eval(f, &work);
            work[i].data_mut()[j] = orig - eps;
            let fm = eval(f, &work);
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let an = a.data()[j];
            if numeric.is_nan() || an.is_nan() {
                report.nan_at.push((i, j));
                continue;
            }
            report.max_rel_error = report.max_rel_error.max(rel_err(an, numeric, scale));
            report.checked += 1;
        }
    }
    report
}

/// Gradient check over the trainable entries of a parameter store.
pub fn grad_check_params(
    store: &ParamStore<f64>,
    f: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    eps: f64,
    max_per_param: usize,
) -> GradReport {
    let mut g = Graph::new(false);
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let ids: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.clone()).collect();
    let analytic: Vec<Option<Tensor<f64>>> = ids.iter().map(|id| grads.param(id).cloned()).collect();
    let scale = analytic.iter().flatten().map(|t| t.max_abs()).fold(0.0, f64::max);

    let eval_store = |s: &ParamStore<f64>| {
        let mut g = Graph::inference();
        let out = f(&mut g, s);
        g.value(out).data()[0]
    };
    let mut report = GradReport::default();
    let mut work = store.clone();
    for (i, id) in ids.iter().enumerate() {
        let n = store.value(id).numel();
        for j in sample_positions(n, max_per_param) {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + eps;
            let fp = eval_store(&work);
            work.value_mut(id).data_mut()[j] = orig - eps;
            let fm = eval_store(&work);
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let an = analytic[i].as_ref().map_or(0.0, |t| t.data()[j]);
            if numeric.is_nan() || an.is_nan() {
                report.nan_at.push((i, j));
                continue;
            }
            report.max_rel_error = report.max_rel_error.max(rel_err(an, numeric, scale));
            report.checked += 1;
        }
    }
    report
}

/// Evenly spread positions, at most `limit` of them.
fn sample_positions(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    (0..limit).map(|k| k * n / limit + (k * 7919) % (n / limit).max(1)).map(|j| j.min(n - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops;

    #[test]
    fn detects_a_wrong_adjoint() {
        struct Wrong;
        impl crate::nn::Backward<f64> for Wrong {
            fn backward(
                &self,
                _: &[&Tensor<f64>],
                _: &Tensor<f64>,
                g: &Tensor<f64>,
                _: &[bool],
            ) -> Vec<Option<Tensor<f64>>> {
                vec![Some(g.map(|v| 2.0 * v))]
            }
        }
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let x = g.value(v[0]).clone();
            let y = g.record(x, &[v[0]], Wrong);
            ops::sum(g, y)
        };
        let err = grad_check(f, &[Tensor::new(&[3], vec![1.0, 2.0, 3.0])], 1e-5);
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }

    #[test]
    fn sampling_stays_in_range() {
        let p = sample_positions(1000, 17);
        assert_eq!(p.len(), 17);
        assert!(p.iter().all(|&j| j < 1000));
    }
}
