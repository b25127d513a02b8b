//! Dense and embedding layers with their initialization.

use rand::Rng;

use crate::error::Result;
use crate::tensor::graph::{Graph, ParamId, ParamStore, Tensor, Var};

/// Uniform ±√(6/(fan_in+fan_out)) matrix.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor {
        shape: [rows, cols],
        values: (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    }
}

/// `y = x W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(rng, inputs, outputs));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, outputs]));
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// Lookup table of `categories × dim` learned vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub categories: usize,
    pub dim: usize,
}

/// `ceil(n/2)` capped at 8.
pub fn embedding_dim(categories: usize) -> usize {
    categories.div_ceil(2).clamp(1, 8)
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, categories: usize) -> Self {
        let dim = embedding_dim(categories);
        let table = store.add(
            format!("{name}.embedding"),
            Tensor {
                shape: [categories, dim],
                values: (0..categories * dim).map(|_| rng.random_range(-0.05..0.05)).collect(),
            },
        );
        Self { table, categories, dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, indices: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.embed(t, indices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_dims_follow_rule() {
        assert_eq!(embedding_dim(5), 3);
        assert_eq!(embedding_dim(10), 5);
        assert_eq!(embedding_dim(1), 1);
        assert_eq!(embedding_dim(40), 8);
    }
}
