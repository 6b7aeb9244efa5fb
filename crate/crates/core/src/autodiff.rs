//! Taped reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed during one forward pass as a
//! node whose inputs are earlier nodes, so the recording order is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients into every node that requires them. A graph is built
//! per forward pass and dropped afterwards.

use std::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::rng::RngState;
use crate::tensor::{strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    Scale(f64),
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `b` either has the shape of `a` or is a vector broadcast over the
    /// rows of `a` (matching its trailing dimension).
    Binary {
        kind: ElementwiseOp,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Unary {
        kind: ElementwiseOp,
        input: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
    },
    Transpose(Var),
    Reshape(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        ranges: Vec<Range<usize>>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Tape of executed operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Records a leaf. Parameters use `requires_grad = true`, data and
    /// dropout masks `false`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── elementwise ────────────────────────────────────────────────────

    /// Applies `kind` to `a` (and `b` for binary kinds).
    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => Ok(self.unary(kind, a)),
            (true, None) => Err(shape_err!("{kind:?} needs two operands")),
            (false, Some(_)) => Err(shape_err!("{kind:?} takes one operand")),
        }
    }

    fn binary(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            _ => unreachable!(),
        };
        let (data, broadcast) = if av.shape() == bv.shape() {
            let d = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (d, false)
        } else if bv.rank() == 1 && av.rank() >= 1 && av.shape()[av.rank() - 1] == bv.len() {
            let n = bv.len();
            let d = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i % n]))
                .collect();
            (d, true)
        } else {
            return Err(shape_err!(
                "{kind:?}: cannot combine {:?} with {:?}",
                av.shape(),
                bv.shape()
            ));
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
            rg,
        ))
    }

    fn unary(&mut self, kind: ElementwiseOp, input: Var) -> Var {
        let value = self.value(input).map(|x| match kind {
            ElementwiseOp::Sigmoid => sigmoid(x),
            ElementwiseOp::Tanh => x.tanh(),
            ElementwiseOp::Relu => x.max(0.0),
            ElementwiseOp::Abs => x.abs(),
            ElementwiseOp::Scale(c) => c * x,
            _ => unreachable!(),
        });
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Unary { kind, input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(ElementwiseOp::Scale(c), a)
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout of `[out × in]` weight matrices.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(shape_err!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (kb, n) = if transpose_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != kb {
            return Err(shape_err!(
                "matmul inner dimensions differ: {:?} · {:?}{}",
                av.shape(),
                bv.shape(),
                if transpose_b { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![0.0; m * n];
        if transpose_b {
            gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        } else {
            gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, transpose_b }, rg))
    }

    /// Batched product `a[B×m×k] · b[B×k×n] → [B×m×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3
            || bv.rank() != 3
            || av.shape()[0] != bv.shape()[0]
            || av.shape()[2] != bv.shape()[1]
        {
            return Err(shape_err!(
                "batch_matmul: incompatible {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_nn(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(shape_err!("transpose needs rank 2, got {:?}", av.shape()));
        }
        let value = Tensor::new(vec![av.shape()[1], av.shape()[0]], transpose2(av))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    // ── structured ─────────────────────────────────────────────────────

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(shape_err!(
                "softmax axis {axis} out of range for {:?}",
                av.shape()
            ));
        }
        if av.has_nan() {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, n, inner) = split_axis(av.shape(), axis);
        let src = av.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax { input: a, axis }, rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !agrees {
                return Err(shape_err!(
                    "concat: {s:?} does not match {base:?} off axis {axis}"
                ));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sub-block selected by one half-open range per dimension.
    pub fn slice(&mut self, a: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let av = self.value(a);
        if ranges.len() != av.rank()
            || ranges
                .iter()
                .zip(av.shape())
                .any(|(r, &d)| r.start >= r.end || r.end > d)
        {
            return Err(shape_err!("slice {ranges:?} invalid for {:?}", av.shape()));
        }
        let shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let mut out = Vec::with_capacity(shape.iter().product());
        for_each_slice_offset(av.shape(), ranges, |off| out.push(av.data()[off]));
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            value,
            Op::Slice {
                input: a,
                ranges: ranges.to_vec(),
            },
            rg,
        ))
    }

    /// Rows of `table[V×z]` selected by `indices`, giving `[n×z]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(shape_err!("gather_rows needs a rank-2 table"));
        }
        if indices.is_empty() {
            return Err(shape_err!("gather_rows with no indices"));
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index(format!(
                "code {bad} outside table of {vocab} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![indices.len(), dim], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; in eval mode
    /// (or with `p = 0`) `a` is returned unchanged.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool, rng: &mut RngState) -> Result<Var> {
        check_probability(p)?;
        if !training || p == 0.0 {
            return Ok(a);
        }
        let mask = dropout_mask(self.shape(a), p, rng)?;
        self.apply_mask(a, mask)
    }

    /// Multiplies `a` by a fixed mask, e.g. one drawn by [`dropout_mask`].
    pub fn apply_mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let m = self.constant(mask);
        self.mul(a, m)
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Back-propagates from the scalar `root`, populating the gradient of
    /// every node on a path to it that requires gradients. Gradients from
    /// earlier calls are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(shape_err!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len();
                let bidx = |j: usize| if *broadcast { j % nb } else { j };
                acc(*a, &mut |ga| {
                    for (j, gj) in g.iter().enumerate() {
                        ga[j] += match kind {
                            ElementwiseOp::Add | ElementwiseOp::Sub => *gj,
                            _ => gj * bv[bidx(j)],
                        };
                    }
                });
                acc(*b, &mut |gb| {
                    for (j, gj) in g.iter().enumerate() {
                        gb[bidx(j)] += match kind {
                            ElementwiseOp::Add => *gj,
                            ElementwiseOp::Sub => -gj,
                            _ => gj * av[j],
                        };
                    }
                });
            }
            Op::Unary { kind, input } => {
                let x = self.value(*input).data();
                acc(*input, &mut |gx| {
                    for (j, gj) in g.iter().enumerate() {
                        gx[j] += gj
                            * match kind {
                                ElementwiseOp::Sigmoid => out[j] * (1.0 - out[j]),
                                ElementwiseOp::Tanh => 1.0 - out[j] * out[j],
                                ElementwiseOp::Relu => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                ElementwiseOp::Abs => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else if x[j] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                ElementwiseOp::Scale(c) => *c,
                                _ => unreachable!(),
                            };
                    }
                });
            }
            Op::MatMul { a, b, transpose_b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = node.value.shape()[1];
                // grad_a = g · Bᵀ (or g · B when b was transposed)
                acc(*a, &mut |ga| {
                    if *transpose_b {
                        gemm_nn_acc(g, bt.data(), ga, m, n, k);
                    } else {
                        gemm_nt_acc(g, bt.data(), ga, m, n, k);
                    }
                });
                // grad_b = Aᵀ · g (or gᵀ · A when b was transposed)
                acc(*b, &mut |gb| {
                    if *transpose_b {
                        gemm_tn_acc(g, at.data(), gb, n, m, k);
                    } else {
                        gemm_tn_acc(at.data(), g, gb, k, m, n);
                    }
                });
            }
            Op::BatchMatMul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (at.shape()[0], at.shape()[1], at.shape()[2]);
                let n = bt.shape()[2];
                acc(*a, &mut |ga| {
                    for s in 0..bs {
                        gemm_nt_acc(
                            &g[s * m * n..(s + 1) * m * n],
                            &bt.data()[s * k * n..(s + 1) * k * n],
                            &mut ga[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for s in 0..bs {
                        gemm_tn_acc(
                            &at.data()[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            &mut gb[s * k * n..(s + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Transpose(input) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*input, &mut |gx| {
                    // output is [r×c]; input is [c×r]
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Reshape(input) => acc(*input, &mut |gx| {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }),
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                acc(*input, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total_block = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = self.shape(v)[*axis] * inner;
                    if wants(v) {
                        acc(v, &mut |gx| {
                            for o in 0..outer {
                                let src =
                                    &g[o * total_block + offset..o * total_block + offset + block];
                                for (d, s) in gx[o * block..(o + 1) * block].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                    }
                    offset += block;
                }
            }
            Op::Slice { input, ranges } => {
                let shape = self.shape(*input).to_vec();
                acc(*input, &mut |gx| {
                    let mut k = 0;
                    for_each_slice_offset(&shape, ranges, |off| {
                        gx[off] += g[k];
                        k += 1;
                    });
                });
            }
            Op::Gather { table, indices } => {
                let dim = self.shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..dim {
                            gt[i * dim + c] += g[r * dim + c];
                        }
                    }
                });
            }
            Op::Sum(input) => acc(*input, &mut |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(input) => {
                let n = self.value(*input).len() as f64;
                acc(*input, &mut |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
        }
    }
}

/// Draws an inverted-dropout mask: `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut RngState) -> Result<Tensor> {
    check_probability(p)?;
    let keep = 1.0 / (1.0 - p);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn for_each_slice_offset(shape: &[usize], ranges: &[Range<usize>], mut f: impl FnMut(usize)) {
    let st = strides(shape);
    let mut idx: Vec<usize> = ranges.iter().map(|r| r.start).collect();
    if idx.is_empty() {
        f(0);
        return;
    }
    let last = idx.len() - 1;
    loop {
        let base: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        // contiguous run along the last axis
        for off in 0..(ranges[last].end - ranges[last].start) {
            f(base + off);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < ranges[d].end {
                break;
            }
            idx[d] = ranges[d].start;
        }
    }
}

fn transpose2(t: &Tensor) -> Vec<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    out
}

// out[m×n] = a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

// out[m×n] = a[m×k] · b[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

// acc[m×k] += a[m×n] · b[n×k]
fn gemm_nn_acc(a: &[f64], b: &[f64], acc: &mut [f64], m: usize, n: usize, k: usize) {
    gemm_nn(a, b, acc, m, n, k)
}

// acc[m×k] += a[m×n] · b[k×n]ᵀ
fn gemm_nt_acc(a: &[f64], b: &[f64], acc: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            acc[i * k + j] += dot(ar, &b[j * n..(j + 1) * n]);
        }
    }
}

// acc[p×q] += a[r×p]ᵀ · b[r×q]
fn gemm_tn_acc(a: &[f64], b: &[f64], acc: &mut [f64], p: usize, r: usize, q: usize) {
    for s in 0..r {
        let br = &b[s * q..(s + 1) * q];
        for i in 0..p {
            let asi = a[s * p + i];
            if asi == 0.0 {
                continue;
            }
            for (o, bv) in acc[i * q..(i + 1) * q].iter_mut().zip(br) {
                *o += asi * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ── gradient checking ─────────────────────────────────────────────────────

/// Outcome of [`grad_check`] for one input.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub input: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst element.
    pub worst_element: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &InputCheck> {
        self.inputs
            .iter()
            .filter(|c| c.max_rel_error >= self.tolerance)
    }
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Compares analytic gradients of the scalar `f` with central differences.
///
/// `f` builds its computation on a fresh graph from leaves bound to
/// `inputs`; it must be deterministic (freeze dropout by reseeding inside
/// `f`). The relative error of an element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        inputs: Vec::with_capacity(inputs.len()),
        tolerance,
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut check = InputCheck {
            input: i,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_element: 0,
        };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            check.max_abs_error = check.max_abs_error.max(abs);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_element = j;
            }
        }
        report.inputs.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut RngState) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn add_vectors() {
        let mut g = Graph::new();
        let a = g.constant(vec1(&[1.0, 2.0]));
        let b = g.constant(vec1(&[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn elementwise_dispatch_checks_arity() {
        let mut g = Graph::new();
        let a = g.constant(vec1(&[0.0]));
        let s = g.elementwise(ElementwiseOp::Sigmoid, a, None).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        assert!(g.elementwise(ElementwiseOp::Add, a, None).is_err());
        assert!(g.elementwise(ElementwiseOp::Relu, a, Some(a)).is_err());
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut g = Graph::new();
        let a = g.param(vec1(&[0.0]));
        let t = g.tanh(a);
        let s = g.sum(t);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0]);
    }

    #[test]
    fn broadcast_rule() {
        let mut g = Graph::new();
        let a = g.param(mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.param(vec1(&[10.0, 20.0, 30.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);

        let bad = g.constant(vec1(&[1.0, 2.0]));
        assert!(matches!(g.add(a, bad), Err(Error::Shape(_))));
        let col = g.constant(mat(2, 1, &[1.0, 2.0]));
        assert!(matches!(g.mul(a, col), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let m = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(mat(1, 2, &[1.0, 2.0]));
        let b = g.constant(mat(2, 1, &[3.0, 4.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
        assert_eq!(g.shape(p), &[1, 1]);

        assert!(matches!(g.matmul(a, a), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let mut rng = RngState::new(3);
        let mut g = Graph::new();
        let a = g.constant(random(&[3, 4], &mut rng));
        let b = g.constant(random(&[5, 4], &mut rng));
        let bt = g.transpose(b).unwrap();
        let p1 = g.matmul(a, bt).unwrap();
        let p2 = g.matmul_bt(a, b).unwrap();
        for (x, y) in g.value(p1).data().iter().zip(g.value(p2).data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_gradient_is_ones_times_bt() {
        let mut rng = RngState::new(11);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[3, 4], &mut rng);
        let mut g = Graph::new();
        let av = g.param(a.clone());
        let bv = g.constant(b.clone());
        let p = g.matmul(av, bv).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        let ga = g.grad(av).unwrap();
        // ones[2×4]·Bᵀ: every row equals the row sums of B
        for i in 0..2 {
            for k in 0..3 {
                let expected: f64 = b.row(k).iter().sum();
                assert!((ga.at(&[i, k]) - expected).abs() < 1e-12);
            }
        }
        // and the same via central differences
        let report = grad_check(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                Ok(g.sum(p))
            },
            &[a, b],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(vec1(&[0.0, 0.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let a = g.constant(vec1(&[0.0, 2f64.ln()]));
        let s = g.softmax(a, 0).unwrap();
        assert!((g.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-15);

        let a = g.constant(vec1(&[1000.0, 1000.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let a = g.constant(vec1(&[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(a, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 2, &[0.0, 1.0, 0.0, 1.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    #[allow(clippy::single_range_in_vec_init)]
    fn concat_and_slice() {
        let mut g = Graph::new();
        let a = g.param(vec1(&[1.0]));
        let b = g.param(vec1(&[2.0, 3.0]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = g.slice(c, &[0..2]).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0]);

        let total = g.sum(c);
        g.backward(total).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0]);

        let m = g.constant(mat(1, 2, &[1.0, 2.0]));
        assert!(matches!(g.concat(&[a, m], 0), Err(Error::Shape(_))));
        assert!(g.slice(c, &[2..4]).is_err());
    }

    #[test]
    fn concat_along_columns_routes_gradients() {
        let mut g = Graph::new();
        let a = g.param(mat(2, 1, &[1.0, 2.0]));
        let b = g.param(mat(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = g.constant(mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn slice_inner_block_of_rank3() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let a = g.param(t);
        let s = g.slice(a, &[0..2, 1..2, 0..2]).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 3.0, 8.0, 9.0]);
        let total = g.sum(s);
        g.backward(total).unwrap();
        let grad = g.grad(a).unwrap().data().to_vec();
        assert_eq!(grad.iter().sum::<f64>(), 4.0);
        assert_eq!(grad[2], 1.0);
        assert_eq!(grad[9], 1.0);
        assert_eq!(grad[0], 0.0);
    }

    #[test]
    fn dropout_contract() {
        let mut rng = RngState::new(5);
        let mut g = Graph::new();
        let a = g.param(Tensor::ones(&[4]));
        assert_eq!(g.dropout(a, 0.0, true, &mut rng).unwrap(), a);
        assert_eq!(g.dropout(a, 0.7, false, &mut rng).unwrap(), a);
        assert!(matches!(
            g.dropout(a, 1.0, true, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            g.dropout(a, -0.1, false, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_mean_is_preserved() {
        let mut rng = RngState::new(17);
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[100_000]));
        let d = g.dropout(a, 0.5, true, &mut rng).unwrap();
        let v = g.value(d);
        let mean = v.sum() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(v.data().iter().all(|&x| x == 0.0 || x == 2.0));
    }

    #[test]
    fn dropout_masks_reproducible() {
        let m1 = dropout_mask(&[64], 0.3, &mut RngState::new(9)).unwrap();
        let m2 = dropout_mask(&[64], 0.3, &mut RngState::new(9)).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn backward_identities() {
        let mut g = Graph::new();
        let a = g.param(mat(2, 2, &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0; 4]);

        let sq = g.mul(a, a).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, -4.0, 6.0, 1.0]);

        assert!(matches!(g.backward(a), Err(Error::Shape(_))));
    }

    #[test]
    fn gather_rows_accumulates_only_used_rows() {
        let mut g = Graph::new();
        let table = g.param(Tensor::eye(3));
        let e = g.gather_rows(table, &[2]).unwrap();
        assert_eq!(g.value(e).data(), &[0.0, 0.0, 1.0]);
        let e = g.gather_rows(table, &[1, 1]).unwrap();
        let s = g.sum(e);
        g.backward(s).unwrap();
        assert_eq!(
            g.grad(table).unwrap().data(),
            &[0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0]
        );
        assert!(matches!(g.gather_rows(table, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn grad_check_sigmoid_matmul() {
        let mut rng = RngState::new(21);
        let a = random(&[3, 3], &mut rng);
        let b = random(&[3, 3], &mut rng);
        let report = grad_check(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                let s = g.sigmoid(p);
                Ok(g.sum(s))
            },
            &[a, b],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn grad_check_with_frozen_dropout() {
        let mut rng = RngState::new(4);
        let a = random(&[3, 3], &mut rng);
        let b = random(&[3, 3], &mut rng);
        let report = grad_check(
            |g, v| {
                let mut mask_rng = RngState::new(99);
                let p = g.matmul(v[0], v[1])?;
                let d = g.dropout(p, 0.3, true, &mut mask_rng)?;
                let s = g.sigmoid(d);
                Ok(g.sum(s))
            },
            &[a, b],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn grad_check_softmax_weighted_sum() {
        // scores -> softmax over time -> weighted sum of rows
        let mut rng = RngState::new(8);
        let scores = random(&[1, 5], &mut rng);
        let states = random(&[1, 5, 3], &mut rng);
        let w = random(&[3], &mut rng);
        let report = grad_check(
            |g, v| {
                let alpha = g.softmax(v[0], 1)?;
                let alpha = g.reshape(alpha, &[1, 1, 5])?;
                let ctx = g.batch_matmul(alpha, v[1])?;
                let ctx = g.reshape(ctx, &[1, 3])?;
                let weighted = g.mul(ctx, v[2])?;
                let t = g.tanh(weighted);
                Ok(g.sum(t))
            },
            &[scores, states, w],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn grad_check_remaining_primitives() {
        let mut rng = RngState::new(31);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[2, 3], &mut rng);
        let c = random(&[3], &mut rng);
        let report = grad_check(
            |g, v| {
                let d = g.sub(v[0], v[1])?;
                let e = g.mul(d, v[2])?;
                let e = g.sub(e, v[2])?;
                let f = g.abs(e);
                let h = g.scale(f, 0.7);
                let t = g.transpose(h)?;
                let r = g.relu(t);
                let m = g.mean(r);
                let n = g.sigmoid(v[0]);
                let s = g.sum(n);
                g.add(m, s)
            },
            &[a, b, c],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(vec1(&[1.0, 2.0]));
        let c = g.constant(vec1(&[3.0, 4.0]));
        let p = g.mul(a, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(a).unwrap().data(), &[3.0, 4.0]);
    }
}
