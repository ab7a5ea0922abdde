//! Small building blocks shared by the networks.

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

use super::params::{Bound, Init, ParamId, Params};

/// `y = x W + b` applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(p: &mut Params, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = p.add(format!("{name}.weight"), init.glorot(in_dim, out_dim));
        let b = p.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let y = g.matmul(x, b.var(self.w));
        g.add_row(y, b.var(self.b))
    }
}

/// Kernel-3 convolution along rows. `stride` is the row distance between
/// consecutive time steps (1 for plain sequences, J for frame-major joint rows).
#[derive(Clone, Debug)]
pub struct TemporalConv {
    lin: Linear,
    stride: isize,
}

impl TemporalConv {
    pub fn new(
        p: &mut Params,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        stride: usize,
    ) -> Self {
        Self {
            lin: Linear::new(p, init, name, 3 * in_dim, out_dim),
            stride: stride as isize,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let prev = g.shift_rows(x, self.stride);
        let next = g.shift_rows(x, -self.stride);
        let taps = g.concat_cols(&[prev, x, next]);
        self.lin.forward(g, b, taps)
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(p: &mut Params, name: &str, dim: usize) -> Self {
        Self {
            gain: p.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0)),
            bias: p.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        let s = g.mul_row(n, b.var(self.gain));
        g.add_row(s, b.var(self.bias))
    }
}

/// Sinusoidal embedding of a scalar position, `[1, dim]`.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        out[k] = (position * freq).sin();
        out[half + k] = (position * freq).cos();
    }
    out
}

/// Rows `0..n` of sinusoidal position codes, `[n, dim]`.
pub fn positional_table(n: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(n, dim);
    for i in 0..n {
        t.row_mut(i).copy_from_slice(&sinusoid(i as f64, dim));
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temporal_conv_sees_neighbours_only() {
        let mut p = Params::new();
        let mut init = Init::new(0);
        let conv = TemporalConv::new(&mut p, &mut init, "c", 1, 1, 1);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let mut impulse = Tensor::zeros(7, 1);
        impulse.set(3, 0, 1.0);
        let x = g.constant(impulse);
        let y = conv.forward(&mut g, &b, x);
        let out = g.value(y);
        for r in [0, 1, 5, 6] {
            assert_eq!(out.get(r, 0), 0.0);
        }
    }

    #[test]
    fn sinusoid_is_bounded_and_distinct() {
        let a = sinusoid(1.0, 16);
        let b = sinusoid(2.0, 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
        assert_eq!(sinusoid(0.0, 4), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn layer_norm_starts_as_standardisation() {
        let mut p = Params::new();
        let ln = LayerNorm::new(&mut p, "ln", 4);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let y = ln.forward(&mut g, &b, x);
        assert!(g.value(y).sum().abs() < 1e-12);
    }
}
