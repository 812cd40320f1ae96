//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value, so node
//! indices are already a topological order and the tape cannot contain a
//! cycle. Vectors have shape `[n]`, matrices `[rows, cols]`; row-wise
//! operations treat a vector as a single row. Shape errors in model code
//! are programming errors and panic; non-finite forward values poison the
//! graph and surface as [`Error::NonFinite`] from [`Graph::check`] and
//! [`Graph::backward`].

use crate::error::{Error, Result};
use crate::tensor::{moments, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    Sum(Var),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Concat(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    poisoned: Option<&'static str>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => panic!("expected vector or matrix, got shape {s:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(op_name(&op));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients accumulate into it on [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Errors if any forward value so far was NaN or infinite.
    pub fn check(&self) -> Result<()> {
        match self.poisoned {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    // ---- elementwise ------------------------------------------------------

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{}: shape mismatch", op_name(&op));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("shape");
        self.push(t, op, &[a, b])
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("shape");
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds vector `b` to every row of `a` (or to `a` itself when it is a vector).
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (_, c) = dims2(ta);
        assert_eq!(tb.shape(), &[c], "add_row: bias length");
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % c])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("shape");
        self.push(t, Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.len(), mask.len(), "mul_const: mask length");
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("shape");
        self.push(t, Op::MulConst(a, mask), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(
            a,
            gelu,
            Op::Gelu(a),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            panic!("matmul: expected matrices, got {:?} x {:?}", ta.shape(), tb.shape());
        };
        assert_eq!(k, k2, "matmul: inner dimension");
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out).expect("shape");
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    /// `W · x` for `W: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (tw, tx) = (self.value(w), self.value(x));
        let &[m, n] = tw.shape() else {
            panic!("matvec: expected matrix, got {:?}", tw.shape());
        };
        assert_eq!(tx.shape(), &[n], "matvec: vector length");
        let out = (0..m)
            .map(|i| dot(tw.row(i), tx.data()))
            .collect::<Vec<_>>();
        self.push(Tensor::vector(out), Op::MatVec(w, x), &[w, x])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let &[r, c] = ta.shape() else {
            panic!("transpose: expected matrix, got {:?}", ta.shape());
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out).expect("shape");
        self.push(t, Op::Transpose(a), &[a])
    }

    // ---- reductions and reshaping ----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Sums a list of scalars (or same-shape tensors) left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut it = vars.iter().copied();
        let first = it.next().expect("add_all: empty");
        it.fold(first, |acc, v| self.add(acc, v))
    }

    /// Mean over rows: `[r, c] -> [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = dims2(ta);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&ta.data()[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        self.push(Tensor::vector(out), Op::MeanRows(a), &[a])
    }

    /// Row lookup: `[r, c]` indexed by `ids` -> `[ids.len(), c]`.
    pub fn gather(&mut self, a: Var, ids: &[usize]) -> Var {
        let ta = self.value(a);
        let (r, c) = dims2(ta);
        assert!(!ids.is_empty(), "gather: no indices");
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < r, "gather: row {i} out of range {r}");
            out.extend_from_slice(ta.row(i));
        }
        let t = Tensor::new(vec![ids.len(), c], out).expect("shape");
        self.push(t, Op::Gather(a, ids.to_vec()), &[a])
    }

    /// Single row of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let t = Tensor::vector(self.value(a).row(i).to_vec());
        self.push(t, Op::Row(a, i), &[a])
    }

    /// Stacks vectors and/or matrices with a common column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows: empty");
        let c = dims2(self.value(parts[0])).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            let (r, pc) = dims2(tp);
            assert_eq!(pc, c, "stack_rows: column count");
            out.extend_from_slice(tp.data());
            rows += r;
        }
        let t = Tensor::new(vec![rows, c], out).expect("shape");
        self.push(t, Op::StackRows(parts.to_vec()), parts)
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: empty");
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.shape().len(), 1, "concat: vectors only");
            out.extend_from_slice(tp.data());
        }
        self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), parts)
    }

    /// Selects elements by flat index -> `[idx.len()]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        let out = idx.iter().map(|&i| ta.data()[i]).collect();
        self.push(Tensor::vector(out), Op::Pick(a, idx.to_vec()), &[a])
    }

    // ---- normalization ----------------------------------------------------

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = dims2(tx);
        assert_eq!(tg.shape(), &[c], "layer_norm: gain length");
        assert_eq!(tb.shape(), &[c], "layer_norm: bias length");
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let (mean, rstd) = moments(row, eps);
            for j in 0..c {
                out.push((row[j] - mean) * rstd * tg.data()[j] + tb.data()[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("shape");
        self.push(t, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias])
    }

    /// Row-wise softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = dims2(ta);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(crate::tensor::softmax_unchecked(&ta.data()[i * c..(i + 1) * c]));
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("shape");
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Row-wise softmax with entries where `mask` is `-inf` forced to zero
    /// probability. Each row needs at least one open entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &[f64]) -> Var {
        let ta = self.value(a);
        let (r, c) = dims2(ta);
        assert_eq!(mask.len(), r * c, "masked_softmax: mask size");
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row: Vec<f64> = ta.data()[i * c..(i + 1) * c]
                .iter()
                .zip(&mask[i * c..(i + 1) * c])
                .map(|(x, m)| x + m)
                .collect();
            out.extend(crate::tensor::softmax_unchecked(&row));
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("shape");
        // the softmax backward only reads the output, where closed entries are 0
        self.push(t, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = dims2(ta);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            out.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("shape");
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from scalar `out`, adding into the gradient buffers of
    /// every upstream trainable leaf. Calling it twice without
    /// [`Graph::zero_grad`] doubles the accumulated gradients.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let shape = self.value(out).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.check()?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let buf = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (b, v) in buf.iter_mut().zip(&g) {
                    *b += v;
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !needs(v) {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| {
                    let c = d.len();
                    for (k, gv) in g.iter().enumerate() {
                        d[k % c] += gv;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| axpy(d, g, *s)),
            Op::MulConst(a, mask) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * mask[k];
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let (ad, bd) = (ta.data(), tb.data());
                // dA = G · Bᵀ
                acc(*a, &mut |d| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            d[r * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |d| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (dv, gv) in d[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::MatVec(w, x) => {
                let (tw, xd) = (&self.nodes[w.0].value, val(*x));
                let n = tw.shape()[1];
                acc(*w, &mut |d| {
                    for (r, gv) in g.iter().enumerate() {
                        for (dv, xv) in d[r * n..(r + 1) * n].iter_mut().zip(xd) {
                            *dv += gv * xv;
                        }
                    }
                });
                acc(*x, &mut |d| {
                    for (r, gv) in g.iter().enumerate() {
                        axpy(d, tw.row(r), *gv);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[1], node.value.shape()[0]);
                acc(*a, &mut |d| {
                    for i2 in 0..r {
                        for j in 0..c {
                            d[i2 * c + j] += g[j * r + i2];
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Gelu(a) => {
                let xa = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        let x = xa[k];
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        d[k] += g[k] * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::Abs(a) => {
                let xa = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sign(xa[k]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanRows(a) => {
                let (r, c) = dims2(&self.nodes[a.0].value);
                acc(*a, &mut |d| {
                    for i2 in 0..r {
                        for j in 0..c {
                            d[i2 * c + j] += g[j] / r as f64;
                        }
                    }
                });
            }
            Op::Gather(a, ids) => {
                let c = node.value.cols();
                acc(*a, &mut |d| {
                    for (k, &id) in ids.iter().enumerate() {
                        axpy(&mut d[id * c..(id + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                });
            }
            Op::Row(a, r) => {
                let c = node.value.len();
                acc(*a, &mut |d| axpy(&mut d[r * c..(r + 1) * c], g, 1.0));
            }
            Op::StackRows(parts) | Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &mut |d| axpy(d, &g[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::Pick(a, idx) => acc(*a, &mut |d| {
                for (k, &flat) in idx.iter().enumerate() {
                    d[flat] += g[k];
                }
            }),
            Op::LayerNorm { x, gain, bias, eps } => {
                let (tx, gd) = (&self.nodes[x.0].value, val(*gain));
                let (r, c) = dims2(tx);
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i2 in 0..r {
                    let row = &tx.data()[i2 * c..(i2 + 1) * c];
                    let grow = &g[i2 * c..(i2 + 1) * c];
                    let (mean, rstd) = moments(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gd).map(|(a2, b2)| a2 * b2).collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a2, b2)| a2 * b2).sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        dx[i2 * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        dg[j] += grow[j] * xhat[j];
                        db[j] += grow[j];
                    }
                }
                acc(*x, &mut |d| axpy(d, &dx, 1.0));
                acc(*gain, &mut |d| axpy(d, &dg, 1.0));
                acc(*bias, &mut |d| axpy(d, &db, 1.0));
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |d| {
                    for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let s = dot(yr, gr);
                        for j in 0..c {
                            d[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |d| {
                    for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            d[r * c + j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::MulConst(..) => "mul_const",
        Op::MatMul(..) => "matmul",
        Op::MatVec(..) => "matvec",
        Op::Transpose(..) => "transpose",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Gelu(..) => "gelu",
        Op::Abs(..) => "abs",
        Op::Sum(..) => "sum",
        Op::MeanRows(..) => "mean_rows",
        Op::Gather(..) => "gather",
        Op::Row(..) => "row",
        Op::StackRows(..) => "stack_rows",
        Op::Concat(..) => "concat",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::Pick(..) => "pick",
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
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

/// Tanh-approximated GELU on a scalar.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
