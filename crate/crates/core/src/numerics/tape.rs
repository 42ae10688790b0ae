//! Reverse-mode gradient tape over the handful of operations the denoiser is
//! built from.
//!
//! Every node holds a 64-bit value. Leaves are either constants or named
//! parameters; only nodes downstream of a parameter carry gradients.

use std::collections::BTreeMap;

use super::kernels::{self, AttnDims};
use super::params::ParamStore;
use super::tensor::{DType, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, b: Var },
    MulRow { a: Var, g: Var },
    MulCol { a: Var, g: Var },
    MulScalar { a: Var, s: Var },
    Scale { a: Var, c: f64 },
    MulConst { a: Var, c: Vec<f64> },
    Tanh(Var),
    Silu(Var),
    LayerNorm { a: Var, inv: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<f64> },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize, end: usize },
    Pool2x2 { a: Var, frames: usize, h: usize, w: usize },
    Square(Var),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    t.rows_cols()
}

fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::with_dtype(DType::F64, shape, data).expect("tape shapes are consistent")
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = last;
    s
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.dtype(), DType::F64);
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.to_dtype(DType::F64);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named parameter leaf. Repeated calls with the same name return the same
    /// node, so a parameter used in several places accumulates one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = t.to_dtype(DType::F64);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (rows, k) = rows_cols(self.value(a));
        let (kb, n) = self.value(b).dims2().expect("matmul rhs must be rank 2");
        assert_eq!(k, kb, "matmul inner dims");
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), rows, k, n);
        let shape = with_last(self.value(a).shape(), n);
        self.push(t64(shape, out), Op::MatMul { a, b, k, n }, &[a, b])
    }

    /// `x · w + b`, `w` stored `in × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        t64(va.shape().to_vec(), data)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        t64(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a row vector `b` (length c) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, c) = rows_cols(self.value(a));
        assert_eq!(self.value(b).len(), c, "add_row width");
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        data.chunks_exact_mut(c)
            .for_each(|row| row.iter_mut().zip(&bv).for_each(|(x, y)| *x += y));
        let shape = self.value(a).shape().to_vec();
        self.push(t64(shape, data), Op::AddRow { a, b }, &[a, b])
    }

    /// Multiplies every row of `a` by the row vector `g` (length c).
    pub fn mul_row(&mut self, a: Var, g: Var) -> Var {
        let (_, c) = rows_cols(self.value(a));
        assert_eq!(self.value(g).len(), c, "mul_row width");
        let gv = self.value(g).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        data.chunks_exact_mut(c)
            .for_each(|row| row.iter_mut().zip(&gv).for_each(|(x, y)| *x *= y));
        let shape = self.value(a).shape().to_vec();
        self.push(t64(shape, data), Op::MulRow { a, g }, &[a, g])
    }

    /// Multiplies row i of `a` by the scalar `g[i]` (`g` is rows × 1).
    pub fn mul_col(&mut self, a: Var, g: Var) -> Var {
        let (rows, c) = rows_cols(self.value(a));
        assert_eq!(self.value(g).len(), rows, "mul_col height");
        let gv = self.value(g).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        data.chunks_exact_mut(c)
            .zip(&gv)
            .for_each(|(row, s)| row.iter_mut().for_each(|x| *x *= s));
        let shape = self.value(a).shape().to_vec();
        self.push(t64(shape, data), Op::MulCol { a, g }, &[a, g])
    }

    /// Multiplies `a` by a one-element node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar expects one element");
        let sv = self.scalar(s);
        let v = self.unary(a, |x| x * sv);
        self.push(v, Op::MulScalar { a, s }, &[a, s])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| x * c);
        self.push(v, Op::Scale { a, c }, &[a])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Var {
        assert_eq!(self.value(a).len(), c.len(), "mul_const size");
        let cv = c.data().to_vec();
        let va = self.value(a);
        let data = va.data().iter().zip(&cv).map(|(x, y)| x * y).collect();
        let v = t64(va.shape().to_vec(), data);
        self.push(v, Op::MulConst { a, c: cv }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.unary(a, kernels::silu);
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(t64(vec![1], vec![s]), Op::SumAll(a), &[a])
    }

    /// Last-axis normalization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (_, c) = rows_cols(self.value(a));
        let (y, inv) = kernels::layer_norm_forward(self.value(a).data(), c, eps);
        let shape = self.value(a).shape().to_vec();
        self.push(t64(shape, y), Op::LayerNorm { a, inv }, &[a])
    }

    /// Layer norm followed by per-channel `gamma`, `beta`.
    pub fn layer_norm_affine(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let n = self.layer_norm(a, eps);
        let g = self.mul_row(n, gamma);
        self.add_row(g, beta)
    }

    /// Batched multi-head attention; see [`AttnDims`] for the row layout.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims) -> Var {
        let kv_b = if dims.kv_shared { 1 } else { dims.batches };
        assert_eq!(self.value(q).len(), dims.batches * dims.nq * dims.d, "attention q");
        assert_eq!(self.value(k).len(), kv_b * dims.nk * dims.d, "attention k");
        assert_eq!(self.value(v).len(), kv_b * dims.nk * dims.dv, "attention v");
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
        );
        let value = t64(vec![dims.batches * dims.nq, dims.dv], out);
        self.push(value, Op::Attention { q, k, v, dims, probs }, &[q, k, v])
    }

    /// Row `i` of the result is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = self.value(a);
        let (rows, c) = rows_cols(va);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < rows, "gather index {i} out of {rows}");
            data.extend_from_slice(va.row(i));
        }
        let v = t64(vec![idx.len(), c], data);
        self.push(v, Op::GatherRows { a, idx }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = rows_cols(self.value(parts[0])).1;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(rows_cols(self.value(p)).1, c, "concat_rows width");
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / c;
        self.push(t64(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let (rows, c) = rows_cols(va);
        assert!(start < end && end <= c, "slice_cols range");
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..end]);
        }
        self.push(t64(vec![rows, end - start], data), Op::SliceCols { a, start, end }, &[a])
    }

    /// 2×2 average pooling of `frames` token grids of size `h × w`
    /// (rows frame-major, then row-major within a frame).
    pub fn pool2x2(&mut self, a: Var, frames: usize, h: usize, w: usize) -> Var {
        let va = self.value(a);
        let (rows, c) = rows_cols(va);
        assert_eq!(rows, frames * h * w, "pool2x2 rows");
        assert!(h % 2 == 0 && w % 2 == 0, "pool2x2 needs even grid");
        let (h2, w2) = (h / 2, w / 2);
        let mut data = vec![0.0; frames * h2 * w2 * c];
        for f in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    let src = va.row(f * h * w + y * w + x);
                    let dst = (f * h2 * w2 + (y / 2) * w2 + x / 2) * c;
                    data[dst..dst + c]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += 0.25 * s);
                }
            }
        }
        self.push(
            t64(vec![frames * h2 * w2, c], data),
            Op::Pool2x2 { a, frames, h, w },
            &[a],
        )
    }

    /// Back-propagates from a one-element node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(n, v)| (n.clone(), *v))
            .collect();
        Grads { grads, params }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        use kernels::{gemm, View};
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, k, n } => {
                let rows = g.len() / n;
                if let Some(da) = self.acc(grads, *a) {
                    gemm(rows, *n, *k, 1.0, g, View::rows(0, *n), val(*b), View::t(0, *n), 1.0, da, View::rows(0, *k));
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm(*k, rows, *n, 1.0, val(*a), View::t(0, *k), g, View::rows(0, *n), 1.0, db, View::rows(0, *n));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(val(*b)).for_each(|((x, y), z)| *x += y * z);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).zip(val(*a)).for_each(|((x, y), z)| *x += y * z);
                }
            }
            Op::AddRow { a, b } => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(d) = self.acc(grads, *b) {
                    let c = d.len();
                    for row in g.chunks_exact(c) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MulRow { a, g: gv } => {
                let c = self.nodes[gv.0].value.len();
                if let Some(d) = self.acc(grads, *a) {
                    let w = val(*gv);
                    for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((x, y), z) in drow.iter_mut().zip(grow).zip(w) {
                            *x += y * z;
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *gv) {
                    for (grow, arow) in g.chunks_exact(c).zip(val(*a).chunks_exact(c)) {
                        for ((x, y), z) in d.iter_mut().zip(grow).zip(arow) {
                            *x += y * z;
                        }
                    }
                }
            }
            Op::MulCol { a, g: gv } => {
                let rows = self.nodes[gv.0].value.len();
                let c = g.len() / rows;
                if let Some(d) = self.acc(grads, *a) {
                    for ((drow, grow), s) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(val(*gv)) {
                        drow.iter_mut().zip(grow).for_each(|(x, y)| *x += y * s);
                    }
                }
                if let Some(d) = self.acc(grads, *gv) {
                    for ((x, grow), arow) in d.iter_mut().zip(g.chunks_exact(c)).zip(val(*a).chunks_exact(c)) {
                        *x += grow.iter().zip(arow).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
            Op::MulScalar { a, s } => {
                let sv = val(*s)[0];
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y * sv);
                }
                if let Some(d) = self.acc(grads, *s) {
                    d[0] += g.iter().zip(val(*a)).map(|(p, q)| p * q).sum::<f64>();
                }
            }
            Op::Scale { a, c } => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
            }
            Op::MulConst { a, c } => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(c).for_each(|((x, y), z)| *x += y * z);
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    let out = node.value.data();
                    d.iter_mut().zip(g).zip(out).for_each(|((x, y), t)| *x += y * (1.0 - t * t));
                }
            }
            Op::Silu(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    let inp = val(*a);
                    d.iter_mut()
                        .zip(g)
                        .zip(inp)
                        .for_each(|((x, y), z)| *x += y * kernels::silu_grad(*z));
                }
            }
            Op::Square(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(val(*a)).for_each(|((x, y), z)| *x += 2.0 * y * z);
                }
            }
            Op::SumAll(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::LayerNorm { a, inv } => {
                let c = rows_cols(&node.value).1;
                if let Some(d) = self.acc(grads, *a) {
                    kernels::layer_norm_backward(node.value.data(), inv, g, c, d);
                }
            }
            Op::Attention { q, k, v, dims, probs } => {
                let mut dq = vec![0.0; self.nodes[q.0].value.len()];
                let mut dk = vec![0.0; self.nodes[k.0].value.len()];
                let mut dv = vec![0.0; self.nodes[v.0].value.len()];
                kernels::attention_backward(val(*q), val(*k), val(*v), probs, g, *dims, &mut dq, &mut dk, &mut dv);
                for (var, part) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = self.acc(grads, var) {
                        d.iter_mut().zip(&part).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let c = rows_cols(&node.value).1;
                if let Some(d) = self.acc(grads, *a) {
                    for (row, &i) in g.chunks_exact(c).zip(idx) {
                        d[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(d) = self.acc(grads, p) {
                        d.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::SliceCols { a, start, end } => {
                let c = rows_cols(&self.nodes[a.0].value).1;
                let w = end - start;
                if let Some(d) = self.acc(grads, *a) {
                    for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                        drow[*start..*end].iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Pool2x2 { a, frames, h, w } => {
                let c = rows_cols(&node.value).1;
                let (h2, w2) = (h / 2, w / 2);
                if let Some(d) = self.acc(grads, *a) {
                    for f in 0..*frames {
                        for y in 0..*h {
                            for x in 0..*w {
                                let dst = (f * h * w + y * w + x) * c;
                                let src = (f * h2 * w2 + (y / 2) * w2 + x / 2) * c;
                                for j in 0..c {
                                    d[dst + j] += 0.25 * g[src + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
}

impl Grads {
    /// Gradient with respect to any node, if one reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter, shaped like the parameters.
    /// Parameters the loss does not depend on get zeros.
    pub fn params(&self, tape: &Tape) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.params {
            let shape = tape.value(v).shape().to_vec();
            let data = self
                .wrt(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
            out.insert(name.clone(), t64(shape, data));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_difference, relative_error};
    use crate::numerics::Rng;

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences for a random
    /// probe weight `w`, so every output element contributes.
    fn check_unary(shape: &[usize], seed: u64, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = Rng::new(seed);
        let x0 = rng.normal_tensor(shape.to_vec());
        let probe = {
            let mut t = Tape::new();
            let x = t.constant(&x0);
            let y = build(&mut t, x);
            rng.normal_tensor(t.value(y).shape().to_vec())
        };
        let eval = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.param("x", x, true);
            let y = build(&mut t, xv);
            let y = t.mul_const(y, &probe);
            let l = t.sum_all(y);
            (t.scalar(l), t, l)
        };
        let (_, tape, loss) = eval(&x0);
        let analytic = tape.backward(loss).params(&tape).get("x").unwrap().clone();
        let numeric = central_difference(&x0, 1e-6, |x| eval(x).0);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(relative_error(*a, *n) < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn elementwise_grads() {
        check_unary(&[3, 4], 1, |t, x| t.tanh(x));
        check_unary(&[3, 4], 2, |t, x| t.silu(x));
        check_unary(&[3, 4], 3, |t, x| t.square(x));
        check_unary(&[3, 4], 4, |t, x| {
            let y = t.tanh(x);
            t.mul(x, y)
        });
        check_unary(&[3, 4], 5, |t, x| {
            let y = t.scale(x, 3.0);
            t.sub(y, x)
        });
    }

    #[test]
    fn structural_grads() {
        check_unary(&[5, 4], 6, |t, x| t.layer_norm(x, 1e-5));
        check_unary(&[6, 4], 7, |t, x| t.gather_rows(x, vec![0, 0, 5, 2, 2, 2, 1]));
        check_unary(&[3, 4], 8, |t, x| t.slice_cols(x, 1, 3));
        check_unary(&[3, 4], 9, |t, x| {
            let y = t.tanh(x);
            t.concat_rows(&[x, y, x])
        });
        check_unary(&[2 * 4 * 4, 3], 10, |t, x| t.pool2x2(x, 2, 4, 4));
    }

    #[test]
    fn broadcast_grads() {
        check_unary(&[4, 3], 11, |t, x| {
            let b = t.slice_cols(x, 0, 3);
            let row = t.gather_rows(b, vec![1]);
            let r = t.add_row(x, row);
            t.mul_row(r, row)
        });
        check_unary(&[4, 3], 12, |t, x| {
            let col = t.slice_cols(x, 2, 3);
            t.mul_col(x, col)
        });
        check_unary(&[4, 3], 13, |t, x| {
            let s = t.slice_cols(x, 1, 2);
            let s = t.gather_rows(s, vec![3]);
            t.mul_scalar(x, s)
        });
        check_unary(&[4, 3], 14, |t, x| {
            let w = t.slice_cols(x, 0, 3);
            let w = t.gather_rows(w, vec![0, 1, 2]);
            t.matmul(x, w)
        });
    }

    #[test]
    fn attention_grads_all_inputs() {
        for (kv_shared, seed) in [(false, 20), (true, 21)] {
            let dims = AttnDims {
                batches: 2,
                nq: 3,
                nk: 4,
                d: 4,
                dv: 6,
                heads: 2,
                kv_shared,
            };
            let kv_rows = if kv_shared { 4 } else { 8 };
            // One packed input, sliced into q, k and v so a single check
            // covers all three gradients.
            check_unary(&[6 + 2 * kv_rows, 6], seed, move |t, x| {
                let q_rows: Vec<usize> = (0..6).collect();
                let k_rows: Vec<usize> = (6..6 + kv_rows).collect();
                let v_rows: Vec<usize> = (6 + kv_rows..6 + 2 * kv_rows).collect();
                let q = t.gather_rows(x, q_rows);
                let q = t.slice_cols(q, 0, 4);
                let k = t.gather_rows(x, k_rows);
                let k = t.slice_cols(k, 2, 6);
                let v = t.gather_rows(x, v_rows);
                t.attention(q, k, v, dims)
            });
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(&Tensor::full([2], 3.0));
        let p = t.param("p", &Tensor::full([2], 2.0), true);
        let y = t.mul(c, p);
        let l = t.sum_all(y);
        let g = t.backward(l);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(p).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn repeated_param_accumulates() {
        let mut t = Tape::new();
        let p = t.param("p", &Tensor::full([1], 2.0), true);
        let p2 = t.param("p", &Tensor::full([1], 99.0), true);
        assert_eq!(p, p2);
        let y = t.mul(p, p2);
        let g = t.backward(y);
        assert_eq!(g.wrt(p).unwrap(), &[4.0]);
    }
}
