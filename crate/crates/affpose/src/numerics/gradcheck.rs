//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker perturbs every parameter element by a central difference
//! and compares against the analytic gradient produced by the graph's
//! backward pass. Run it on `f64` stores: at `h = 1e-5` the truncation
//! and roundoff noise both sit far below the acceptance threshold.

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::Scalar;

/// Outcome of a finite-difference check.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Largest relative error over all checked elements.
    pub max_rel_error: f64,
    /// `(param name, flat element index, analytic, numeric)` of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Elements compared.
    pub checked: usize,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error with an absolute floor: small gradients compare on an
/// absolute scale so that `0 vs 1e-12` noise does not dominate.
fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / scale
}

/// Check the analytic gradient of `loss` against central differences.
///
/// `loss` must rebuild its graph from the store each call and return the
/// scalar loss after running backward into the store (the usual
/// zero-grads / forward / backward cycle). The closure is probed twice at
/// the base point first; if the two evaluations differ bitwise, the loss
/// is non-deterministic and the check aborts.
pub fn finite_diff_check<S, F>(
    store: &mut ParamStore<S>,
    mut loss: F,
    h: f64,
) -> Result<FdReport>
where
    S: Scalar,
    F: FnMut(&mut ParamStore<S>) -> Result<S>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Usage(format!("step h must be positive, got {h}")));
    }
    let l0 = loss(store)?;
    let l1 = loss(store)?;
    if l0.into_f64().to_bits() != l1.into_f64().to_bits() {
        return Err(Error::NonDeterministicLoss(format!(
            "{} vs {} at the base point",
            l0.into_f64(),
            l1.into_f64()
        )));
    }
    // Snapshot analytic gradients from the second evaluation.
    let analytic: Vec<Vec<f64>> = (0..store.len())
        .map(|s| store.grad_at(s).as_slice().iter().map(|v| v.into_f64()).collect())
        .collect();

    let hs = S::from_f64(h);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for slot in 0..store.len() {
        let n = store.value_at(slot).len();
        for i in 0..n {
            let original = store.value_at(slot).as_slice()[i];
            set_elem(store, slot, i, original + hs);
            let lp = loss(store)?.into_f64();
            set_elem(store, slot, i, original - hs);
            let lm = loss(store)?.into_f64();
            set_elem(store, slot, i, original);
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[slot][i];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some((store.name_at(slot).to_string(), i, a, numeric));
            }
        }
    }
    // Leave the store's gradients in the base-point state.
    let _ = loss(store)?;
    Ok(report)
}

fn set_elem<S: Scalar>(store: &mut ParamStore<S>, slot: usize, i: usize, v: S) {
    let (values, _) = store.optimizer_view();
    values[slot].as_mut_slice()[i] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use crate::numerics::params::init_linear;
    use crate::numerics::DenseArray;
    use std::rc::Rc;

    /// Two-layer MLP with softmax/NLL head: exercises matmul, bias
    /// broadcast, relu, softmax, and nll backward rules together.
    fn mlp_loss(store: &mut ParamStore<f64>) -> crate::error::Result<f64> {
        store.zero_grads();
        let mut g = Graph::new();
        let x = g.constant(
            DenseArray::new(
                4,
                3,
                vec![
                    0.2, -0.4, 0.9, 1.1, 0.3, -0.7, -0.2, 0.5, 0.6, 0.8, -0.9, 0.1,
                ],
            )
            .unwrap(),
        );
        let w1 = g.param(store, "w1")?;
        let b1 = g.param(store, "b1")?;
        let w2 = g.param(store, "w2")?;
        let b2 = g.param(store, "b2")?;
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, w2)?;
        let o = g.add_row(o, b2)?;
        let p = g.softmax_rows(o)?;
        let loss = g.nll_rows(p, Rc::new(vec![0, 1, 2, 1]))?;
        let scaled = g.scale(loss, 0.25)?;
        g.backward(scaled, store, 1.0)?;
        g.value(scaled).item()
    }

    #[test]
    fn mlp_gradients_match_central_differences() {
        let mut store = ParamStore::<f64>::new();
        let (w1, b1) = init_linear::<f64>(3, 5, 11);
        let (w2, b2) = init_linear::<f64>(5, 3, 12);
        store.register("w1", w1).unwrap();
        store.register("b1", b1).unwrap();
        store.register("w2", w2).unwrap();
        store.register("b2", b2).unwrap();
        let report = finite_diff_check(&mut store, mlp_loss, 1e-5).unwrap();
        assert!(report.checked > 0);
        assert!(
            report.passes(1e-4),
            "max rel err {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }

    #[test]
    fn sigmoid_exp_scale_path_checks_out() {
        let mut store = ParamStore::<f64>::new();
        store
            .register("w", DenseArray::new(1, 4, vec![0.3, -0.8, 0.2, 1.4]).unwrap())
            .unwrap();
        store
            .register("s", DenseArray::scalar(0.7))
            .unwrap();
        let loss = |store: &mut ParamStore<f64>| -> crate::error::Result<f64> {
            store.zero_grads();
            let mut g = Graph::new();
            let w = g.param(store, "w")?;
            let s = g.param(store, "s")?;
            let y = g.sigmoid(w)?;
            let y = g.exp(y)?;
            let y = g.scale_by_scalar(y, s)?;
            let l = g.mean_all(y)?;
            g.backward(l, store, 1.0)?;
            g.value(l).item()
        };
        let report = finite_diff_check(&mut store, loss, 1e-5).unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }

    #[test]
    fn cosine_path_checks_out() {
        let mut store = ParamStore::<f64>::new();
        store
            .register(
                "p",
                DenseArray::new(3, 4, vec![
                    0.5, -0.2, 0.8, 0.1, -0.6, 0.9, 0.3, -0.4, 0.2, 0.2, -0.7, 1.1,
                ])
                .unwrap(),
            )
            .unwrap();
        store
            .register(
                "t",
                DenseArray::new(2, 4, vec![0.9, 0.1, -0.3, 0.5, -0.2, 0.8, 0.6, -0.9]).unwrap(),
            )
            .unwrap();
        let loss = |store: &mut ParamStore<f64>| -> crate::error::Result<f64> {
            store.zero_grads();
            let mut g = Graph::new();
            let p = g.param(store, "p")?;
            let t = g.param(store, "t")?;
            let f = g.cosine_rows(p, t)?;
            let sm = g.softmax_rows(f)?;
            let l = g.nll_rows(sm, Rc::new(vec![0, 1, 0]))?;
            let l = g.scale(l, 1.0 / 3.0)?;
            g.backward(l, store, 1.0)?;
            g.value(l).item()
        };
        let report = finite_diff_check(&mut store, loss, 1e-5).unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }

    #[test]
    fn non_deterministic_loss_is_detected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let mut store = ParamStore::<f64>::new();
        store.register("w", DenseArray::scalar(1.0)).unwrap();
        let loss = |store: &mut ParamStore<f64>| -> crate::error::Result<f64> {
            store.zero_grads();
            counter.set(counter.get() + 1.0);
            Ok(counter.get())
        };
        let err = finite_diff_check(&mut store, loss, 1e-5).unwrap_err();
        match err {
            Error::NonDeterministicLoss(_) => {}
            other => panic!("wrong error: {other}"),
        }
    }
}
