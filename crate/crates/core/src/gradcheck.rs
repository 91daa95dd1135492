//! Central finite-difference checks of analytic parameter gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::params::{Gradients, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    /// `max |a - n| / max(|a|, |n|, 1e-6)` over the parameter's entries.
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` against `(loss(θ+h) - loss(θ-h)) / 2h` for every entry
/// of every parameter in `store`.
pub fn check_gradients(
    store: &ParamStore,
    analytic: &Gradients,
    loss: impl Fn(&ParamStore) -> f64,
    h: f64,
) -> Vec<GradCheck> {
    let mut dense = store.clone();
    dense.zero_grads();
    dense.accumulate(analytic);
    let mut probe = store.clone();
    store
        .ids()
        .map(|id| {
            let mut worst: f64 = 0.0;
            let n = store.value(id).len();
            for k in 0..n {
                let orig = store.value(id).data()[k];
                probe.value_mut(id).data_mut()[k] = orig + h;
                let up = loss(&probe);
                probe.value_mut(id).data_mut()[k] = orig - h;
                let down = loss(&probe);
                probe.value_mut(id).data_mut()[k] = orig;
                worst = worst.max(relative_error(dense.grad(id)[k], (up - down) / (2.0 * h)));
            }
            GradCheck {
                name: store.param(id).name.clone(),
                entries: n,
                max_rel_error: worst,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn exact_gradient_of_a_cubic_passes() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row(alloc::vec![0.5, -1.5, 2.0]));
        let loss = |p: &ParamStore| p.value(id).data().iter().map(|x| x * x * x).sum::<f64>();
        let mut g = Gradients::default();
        g.add_dense(id, s.value(id).data().iter().map(|x| 3.0 * x * x).collect());
        let r = check_gradients(&s, &g, loss, 1e-5);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].entries, 3);
        assert!(r[0].max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row(alloc::vec![1.0]));
        let mut g = Gradients::default();
        g.add_dense(id, alloc::vec![2.2]);
        let r = check_gradients(&s, &g, |p| p.value(id).data()[0].powi(2), 1e-5);
        assert!(r[0].max_rel_error > 0.05);
    }

    #[test]
    fn tiny_gradients_use_the_absolute_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
