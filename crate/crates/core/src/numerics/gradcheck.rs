//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};

/// Worst relative error observed for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry within the tensor.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// One entry per parameter, sorted worst-first.
    pub entries: Vec<GradCheckEntry>,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tol)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.first()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let status = if e.max_rel_err < self.tol { "ok  " } else { "FAIL" };
            out.push_str(&format!(
                "{status} {:<32} rel_err {:.3e}  (analytic {:+.6e}, numeric {:+.6e} at [{}])\n",
                e.name, e.max_rel_err, e.analytic, e.numeric, e.worst_index
            ));
        }
        out
    }
}

/// Compares the gradients currently stored in `store` (one backward pass of
/// a deterministic scalar loss) against central finite differences of
/// `loss_fn`, perturbing every entry of every parameter by ±`h`.
///
/// The relative error is computed per tensor: the largest entrywise
/// discrepancy divided by the numeric gradient's max-norm (floored at
/// 1e-6), so tensors whose gradient is uniformly ~0 compare as exact
/// rather than as noise ratios, and a scale bug on the analytic side
/// reads directly as the scale factor error.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let base1 = loss_fn(store)?;
    let base2 = loss_fn(store)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::contract(format!(
            "grad_check: loss closure is not deterministic ({base1:?} vs {base2:?})"
        )));
    }

    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let name = store.name(id).to_string();
        let len = store.get(id).len();
        let analytic: Vec<f64> = match store.get(id).grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        };
        let mut numeric = vec![0.0; len];
        for e in 0..len {
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + h;
            let fp = loss_fn(store)?;
            store.get_mut(id).data_mut()[e] = orig - h;
            let fm = loss_fn(store)?;
            store.get_mut(id).data_mut()[e] = orig;
            numeric[e] = (fp - fm) / (2.0 * h);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
        let (mut worst, mut worst_idx) = (0.0, 0);
        for e in 0..len {
            let rel = (analytic[e] - numeric[e]).abs() / scale;
            if rel > worst {
                worst = rel;
                worst_idx = e;
            }
        }
        entries.push(GradCheckEntry {
            name,
            max_rel_err: worst,
            worst_index: worst_idx,
            analytic: analytic[worst_idx],
            numeric: numeric[worst_idx],
        });
    }
    entries.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
    Ok(GradCheckReport { entries, h, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::Tensor;
    use std::cell::Cell;

    /// Populate grads for loss = ½θ² over every parameter entry.
    fn quadratic_backward(store: &mut ParamStore) {
        store.zero_grads();
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let g: Vec<f64> = store.get(id).data().to_vec();
            store.get_mut(id).accumulate_grad(&g);
        }
    }

    fn quadratic_loss(store: &ParamStore) -> Result<f64> {
        Ok(store
            .iter()
            .map(|(_, _, t)| t.data().iter().map(|v| 0.5 * v * v).sum::<f64>())
            .sum())
    }

    #[test]
    fn quadratic_gradient_checks_out() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::scalar(3.0));
        quadratic_backward(&mut store);
        let report = grad_check(&mut store, quadratic_loss, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{}", report.render());
        let e = report.worst().unwrap();
        assert!((e.analytic - 3.0).abs() < 1e-12);
        assert!((e.numeric - 3.0).abs() < 1e-8);
    }

    #[test]
    fn softmax_matmul_composite_within_1e6() {
        let mut store = ParamStore::new();
        let w = store.insert(
            "w",
            Tensor::new(vec![4, 4], (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        );
        let x = Tensor::new(vec![4, 4], (0..16).map(|i| (i as f64 * 0.61).cos()).collect()).unwrap();

        let forward = |store: &ParamStore| -> (Tape, f64) {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let vx = tape.input(&x);
            let prod = tape.matmul(bound.var(w), vx).unwrap();
            let sm = tape.softmax_rows(prod);
            let m2 = tape.matmul(sm, vx).unwrap();
            let loss = tape.sum_all(m2);
            let v = tape.value(loss)[0];
            (tape, v)
        };

        // analytic grads
        {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let vx = tape.input(&x);
            let prod = tape.matmul(bound.var(w), vx).unwrap();
            let sm = tape.softmax_rows(prod);
            let m2 = tape.matmul(sm, vx).unwrap();
            let loss = tape.sum_all(m2);
            let grads = tape.backward(loss).unwrap();
            bound.accumulate(&grads, &mut store).unwrap();
        }
        let report = grad_check(&mut store, |s| Ok(forward(s).1), 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        let mut store = ParamStore::new();
        let id = store.insert("theta", Tensor::scalar(3.0));
        quadratic_backward(&mut store);
        // off-by-2 scale bug
        let doubled: Vec<f64> = store.get(id).grad().unwrap().to_vec();
        store.get_mut(id).accumulate_grad(&doubled);
        let report = grad_check(&mut store, quadratic_loss, 1e-5, 1e-4).unwrap();
        assert!(!report.passed());
        let worst = report.worst().unwrap().max_rel_err;
        assert!((worst - 1.0).abs() < 1e-3, "expected rel err ≈ 1.0, got {worst}");
    }

    #[test]
    fn non_deterministic_closure_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::scalar(1.0));
        let calls = Cell::new(0u32);
        let err = grad_check(
            &mut store,
            |_| {
                calls.set(calls.get() + 1);
                Ok(calls.get() as f64)
            },
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn report_lists_every_parameter_once() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        store.insert("b", Tensor::zeros(vec![2]));
        store.insert("c", Tensor::zeros(vec![3]));
        quadratic_backward(&mut store);
        let report = grad_check(&mut store, quadratic_loss, 1e-5, 1e-4).unwrap();
        let mut names: Vec<&str> = report.entries.iter().map(|e| e.name.as_str()).collect();
        names.sort();
        assert_eq!(names, vec!["a", "b", "c"]);
    }
}
