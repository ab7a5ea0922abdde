//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and returns a [`Gradients`] table. One graph is built per
//! sample (or per batch for the pairwise contrastive head), which keeps graphs
//! independent and lets the trainers run them on separate threads.

use std::sync::Arc;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ShiftRows(Var, isize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherCols(Var, Vec<usize>),
    SliceRows(Var, usize),
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    GraphMix { x: Var, adjacency: Arc<Tensor> },
    Clamp(Var, f64, f64),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar (or seeded) output with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, t: Arc<Tensor>) -> Var {
        self.push_arc(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf_arc(&mut self, t: Arc<Tensor>, needs_grad: bool) -> Var {
        self.push_arc(t, Op::Leaf, needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row: [1, cols]` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// `a * row` elementwise with `row: [1, cols]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "mul_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "mul_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    /// Repeat a `[1, cols]` row `rows` times.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "broadcast_rows expects a row vector");
        let out = Tensor::from_fn(rows, rv.cols(), |_, c| rv.get(0, c));
        let ng = self.ng(row);
        self.push(out, Op::BroadcastRows(row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a @ b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Natural logarithm.
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input is inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row standardisation (biased variance), without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let n = av.cols() as f64;
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNormRows { x: a, inv_std }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Column means over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = av.col_sums().scale(1.0 / av.rows() as f64);
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// `out[r] = a[r - shift]`, zero where out of range.
    pub fn shift_rows(&mut self, a: Var, shift: isize) -> Var {
        let av = self.value(a);
        let out = shifted(av, shift);
        let ng = self.ng(a);
        self.push(out, Op::ShiftRows(a, shift), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols(), "slice_cols out of range");
        let out = Tensor::from_fn(av.rows(), end - start, |r, c| av.get(r, start + c));
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let av = self.value(a);
        assert!(cols.iter().all(|&c| c < av.cols()), "gather_cols out of range");
        let out = Tensor::from_fn(av.rows(), cols.len(), |r, c| av.get(r, cols[c]));
        let ng = self.ng(a);
        self.push(out, Op::GatherCols(a, cols.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.rows(), "slice_rows out of range");
        let out = Tensor::from_vec(
            end - start,
            av.cols(),
            av.data()[start * av.cols()..end * av.cols()].to_vec(),
        );
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    /// Max over non-overlapping groups of `factor` consecutive rows.
    pub fn max_pool_rows(&mut self, a: Var, factor: usize) -> Var {
        let av = self.value(a);
        assert!(factor >= 1 && av.rows() % factor == 0, "max_pool_rows needs rows divisible by factor");
        let rows = av.rows() / factor;
        let cols = av.cols();
        let mut out = Tensor::zeros(rows, cols);
        let mut argmax = vec![0usize; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let mut best = r * factor;
                for k in 1..factor {
                    if av.get(r * factor + k, c) > av.get(best, c) {
                        best = r * factor + k;
                    }
                }
                out.set(r, c, av.get(best, c));
                argmax[r * cols + c] = best;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaxPoolRows { x: a, argmax }, ng)
    }

    /// Mix joints within each frame: rows are laid out frame-major in blocks of
    /// `adjacency.rows()` joints and `out[f*J + j] = sum_k adjacency[j, k] * a[f*J + k]`.
    pub fn graph_mix(&mut self, a: Var, adjacency: Arc<Tensor>) -> Var {
        let av = self.value(a);
        let out = mix_blocks(av, &adjacency, false);
        let ng = self.ng(a);
        self.push(out, Op::GraphMix { x: a, adjacency }, ng)
    }

    /// `out[i] = a[rows[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let av = self.value(a);
        assert!(rows.iter().all(|&r| r < av.rows()), "gather_rows out of range");
        let mut out = Tensor::zeros(rows.len(), av.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, rows.to_vec()), ng)
    }

    /// Same buffer, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshape(rows, cols);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar output");
        self.backward_with(loss, Tensor::scalar(1.0))
    }

    /// Backpropagate from any node with an explicit upstream gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Gradients {
        assert_eq!(self.value(out).shape(), seed.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                send(*a, g.mul(val(*b)));
                send(*b, g.mul(val(*a)));
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                send(*row, g.col_sums());
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    for (o, b) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                        *o *= b;
                    }
                }
                send(*a, ga);
                send(*row, g.mul(val(*a)).col_sums());
            }
            Op::BroadcastRows(row) => send(*row, g.col_sums()),
            Op::Scale(a, k) => send(*a, g.scale(*k)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                send(*a, g.matmul_nt(val(*b)));
                send(*b, val(*a).matmul_tn(g));
            }
            Op::MatMulNT(a, b) => {
                send(*a, g.matmul(val(*b)));
                send(*b, g.matmul_tn(val(*a)));
            }
            Op::Silu(a) => send(
                *a,
                val(*a).zip_map(g, |x, gy| {
                    let s = sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                }),
            ),
            Op::Sigmoid(a) => send(*a, y.zip_map(g, |s, gy| gy * s * (1.0 - s))),
            Op::Ln(a) => send(*a, val(*a).zip_map(g, |x, gy| gy / x)),
            Op::Abs(a) => send(*a, val(*a).zip_map(g, |x, gy| gy * sign(x))),
            Op::Square(a) => send(*a, val(*a).zip_map(g, |x, gy| 2.0 * x * gy)),
            Op::Clamp(a, lo, hi) => send(
                *a,
                val(*a).zip_map(g, |x, gy| if x >= *lo && x <= *hi { gy } else { 0.0 }),
            ),
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*a, ga);
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = y.cols() as f64;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                send(*x, ga);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Tensor::filled(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let k = 1.0 / r as f64;
                send(*a, Tensor::from_fn(r, c, |_, j| g.get(0, j) * k));
            }
            Op::ShiftRows(a, s) => send(*a, shifted(g, -*s)),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    send(p, Tensor::from_fn(g.rows(), w, |r, c| g.get(r, off + c)));
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for rr in 0..r {
                    ga.row_mut(rr)[*start..*start + g.cols()].copy_from_slice(g.row(rr));
                }
                send(*a, ga);
            }
            Op::GatherCols(a, cols) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for rr in 0..r {
                    for (k, &src) in cols.iter().enumerate() {
                        let v = ga.get(rr, src) + g.get(rr, k);
                        ga.set(rr, src, v);
                    }
                }
                send(*a, ga);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*a, ga);
            }
            Op::MaxPoolRows { x, argmax } => {
                let (r, c) = val(*x).shape();
                let mut ga = Tensor::zeros(r, c);
                for (k, &src) in argmax.iter().enumerate() {
                    let col = k % c;
                    let v = ga.get(src, col) + g.data()[k];
                    ga.set(src, col, v);
                }
                send(*x, ga);
            }
            Op::GraphMix { x, adjacency } => send(*x, mix_blocks(g, adjacency, true)),
            Op::GatherRows(a, rows) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (i, &src) in rows.iter().enumerate() {
                    for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                send(*a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                send(*a, g.clone().reshape(r, c));
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn shifted(a: &Tensor, shift: isize) -> Tensor {
    let (rows, cols) = a.shape();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let src = r as isize - shift;
        if src >= 0 && (src as usize) < rows {
            out.row_mut(r).copy_from_slice(a.row(src as usize));
        }
    }
    out
}

fn mix_blocks(a: &Tensor, adj: &Tensor, transpose: bool) -> Tensor {
    let j = adj.rows();
    let (rows, cols) = a.shape();
    assert_eq!(rows % j, 0, "graph_mix rows must be a multiple of the joint count");
    let mut out = Tensor::zeros(rows, cols);
    for f in 0..rows / j {
        for dst in 0..j {
            let o = (f * j + dst) * cols;
            for src in 0..j {
                let w = if transpose { adj.get(src, dst) } else { adj.get(dst, src) };
                if w == 0.0 {
                    continue;
                }
                let s = (f * j + src) * cols;
                for c in 0..cols {
                    out.data_mut()[o + c] += w * a.data()[s + c];
                }
            }
        }
    }
    out
}
