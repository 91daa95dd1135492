//! Named trainable parameters and their binding onto a [`Tape`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Ordered collection of parameters. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        libm::sqrt(
            self.params
                .iter()
                .flat_map(|p| p.grad.iter())
                .map(|g| g * g)
                .sum::<f64>(),
        )
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, rows, g) in &grads.entries {
            let p = &mut self.params[id.0];
            match rows {
                None => p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                Some(rows) => {
                    let c = p.value.cols();
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut p.grad[r * c..(r + 1) * c];
                        dst.iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }

    /// Copies values from `other` for every parameter sharing a name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Config(alloc::format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    left: p.value.shape().to_vec(),
                    right: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradients collected from one tape, ready to add into a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Option<Vec<usize>>, Vec<f64>)>,
}

impl Gradients {
    /// Adds a gradient for a whole parameter, e.g. from an analytic penalty.
    pub fn add_dense(&mut self, id: ParamId, grad: Vec<f64>) {
        self.entries.push((id, None, grad));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A tape plus the parameter leaves bound onto it.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    trainable: bool,
    full: Vec<Option<Var>>,
    partial: Vec<(Var, ParamId, Vec<usize>)>,
}

impl<'p> Graph<'p> {
    /// A graph whose parameters receive gradients.
    pub fn new(store: &'p ParamStore) -> Self {
        Self::with_mode(store, true)
    }

    /// A graph that treats every parameter as a constant.
    pub fn frozen(store: &'p ParamStore) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'p ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            full: vec![None; store.len()],
            partial: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Leaf for a whole parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.full[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone(), self.trainable);
        self.full[id.0] = Some(v);
        v
    }

    /// Leaf holding only the selected rows of a parameter matrix; cheaper than
    /// binding a large embedding table.
    pub fn param_rows(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let t = self.store.value(id);
        let c = t.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= t.rows() {
                return Err(Error::Contract(alloc::format!(
                    "row {r} out of range for parameter {} with {} rows",
                    self.store.param(id).name,
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row_slice(r));
        }
        let v = self
            .tape
            .leaf(Tensor::matrix(rows.len().max(1), c, data), self.trainable);
        if self.trainable {
            self.partial.push((v, id, rows.to_vec()));
        }
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn backward(&mut self, root: Var) -> Result<usize> {
        self.tape.backward(root)
    }

    pub fn gradients(&self) -> Gradients {
        let mut entries = Vec::new();
        for (i, v) in self.full.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.tape.grad(*v) {
                    entries.push((ParamId(i), None, g.to_vec()));
                }
            }
        }
        for (v, id, rows) in &self.partial {
            if let Some(g) = self.tape.grad(*v) {
                entries.push((*id, Some(rows.clone()), g.to_vec()));
            }
        }
        Gradients { entries }
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Glorot-uniform initialization for a `fan_in×fan_out` weight.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    uniform(fan_in, fan_out, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn row_leaves_scatter_into_their_rows() {
        let mut store = ParamStore::new();
        let table = store.add("emb", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let mut g = Graph::new(&store);
        let rows = g.param_rows(table, &[2, 0, 2]).unwrap();
        let s = g.tape.sum(rows);
        g.backward(s).unwrap();
        let grads = g.gradients();
        store.accumulate(&grads);
        assert_eq!(store.grad(table), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn frozen_graph_yields_no_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![1.0, 2.0]));
        let mut g = Graph::frozen(&store);
        let v = g.param(w);
        let s = g.tape.sum(v);
        g.backward(s).unwrap();
        assert!(g.gradients().entries.is_empty());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::row(vec![0.0; 3]));
        let b = store.add("b", Tensor::row(vec![0.0; 2]));
        store.params[a.0].grad = vec![3.0, -4.0, 12.0];
        store.params[b.0].grad = vec![5.0, 0.5];
        let before = store.clip_grad_norm(1.5);
        assert!(before > 1.5);
        assert!((store.grad_norm() - 1.5).abs() < 1e-9);
        assert!(store.grad_norm() <= 1.5 + 1e-9);
    }

    #[test]
    fn glorot_respects_bound() {
        let mut r = rng::seeded(3);
        let t = glorot(4, 8, &mut r);
        let bound = libm::sqrt(6.0 / 12.0);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }
}
