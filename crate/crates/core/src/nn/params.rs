use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`Params`] record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of one network.
///
/// Tensors sit behind `Arc` so binding them into a graph is a pointer copy and
/// many per-sample graphs can share one record read-only.
#[derive(Clone, Debug, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter().map(|v| &**v)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut().map(Arc::make_mut)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v.sq_norm()).sum::<f64>().sqrt()
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let name = &self.names[id.0];
        let want = self.values[id.0].shape();
        ensure!(
            value.shape() == want,
            Shape,
            "parameter `{name}` expects shape {want:?}, got {:?}",
            value.shape()
        );
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Round every entry to the nearest `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Zero tensors shaped like each parameter.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| Tensor::zeros(v.rows(), v.cols())).collect()
    }

    /// Put every tensor on the tape. Frozen parameters become constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| g.leaf_arc(v.clone(), trainable))
                .collect(),
        }
    }

    /// Per-parameter gradients in declaration order (zeros where nothing flowed).
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect()
    }
}

/// Parameters of one network placed on a specific graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded weight initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| self.rng.gen_range(-bound..=bound))
    }

    /// Glorot-uniform for a `[fan_in, fan_out]` weight.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(fan_in, fan_out, bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect_gradients() {
        let mut p = Params::new();
        let a = p.add("a", Tensor::filled(1, 2, 2.0));
        let b = p.add("b", Tensor::filled(1, 2, 1.0));
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let sq = g.square(bound.var(a));
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        let out = p.gradients(&bound, &grads);
        assert_eq!(out[0].data(), &[4.0, 4.0]);
        assert_eq!(out[1].data(), &[0.0, 0.0]);
        let _ = b;
    }

    #[test]
    fn set_checks_shape() {
        let mut p = Params::new();
        let a = p.add("a", Tensor::zeros(2, 3));
        assert!(p.set(a, Tensor::zeros(3, 2)).is_err());
        assert!(p.set(a, Tensor::filled(2, 3, 1.0)).is_ok());
        assert_eq!(p.find("a"), Some(a));
        assert_eq!(p.numel(), 6);
    }

    #[test]
    fn rounding_matches_f32() {
        let mut p = Params::new();
        p.add("x", Tensor::scalar(0.1));
        p.round_to_f32();
        assert_eq!(p.tensors().next().unwrap().data()[0], 0.1f32 as f64);
    }
}
