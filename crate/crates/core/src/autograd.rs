//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a `[1, 1]` output walks the tape in reverse and
//! returns the gradient of that output with respect to every node that was
//! created with (or derived from) a gradient-requiring leaf.
//!
//! Stop-gradient is an explicit op ([`Var::detach`]): it creates a fresh leaf
//! sharing the value, so nothing upstream of it is reachable from below.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, T),
    AddRow(usize, usize),
    ScaleRows(usize, Rc<Vec<T>>),
    RepeatRows(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    LayerNorm(usize, Rc<Vec<T>>),
    Silu(usize),
    Softplus(usize),
    MaskedSoftmax(usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Sum(usize),
    SumSq(usize),
    MeanRows(usize),
    CrossEntropy(usize, Rc<Vec<usize>>, Rc<Tensor<T>>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::LayerNorm(..) => "layer_norm",
            Op::Silu(..) => "silu",
            Op::Softplus(..) => "softplus",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Sum(..) => "sum",
            Op::SumSq(..) => "sum_sq",
            Op::MeanRows(..) => "mean_rows",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Count of recorded ops by kind. Used to audit loss graphs.
    pub fn op_histogram(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for node in self.nodes.borrow().iter() {
            *out.entry(node.op.name()).or_insert(0) += 1;
        }
        out
    }

    /// Ops reachable from `root` by following parent links.
    pub fn op_histogram_from(&self, root: Var<'_, T>) -> BTreeMap<&'static str, usize> {
        let nodes = self.nodes.borrow();
        let mut seen = vec![false; root.id + 1];
        let mut stack = vec![root.id];
        let mut out = BTreeMap::new();
        while let Some(id) = stack.pop() {
            if seen[id] {
                continue;
            }
            seen[id] = true;
            let op = &nodes[id].op;
            *out.entry(op.name()).or_insert(0) += 1;
            stack.extend(parents(op));
        }
        out
    }

    /// Gradient of the scalar `root` with respect to every reachable node.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.id + 1];
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(Tensor::scalar(T::one()));
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let accumulate = |grads: &mut Vec<Option<Tensor<T>>>, pid: usize, delta: Tensor<T>| {
                if !nodes[pid].requires_grad {
                    return;
                }
                match &mut grads[pid] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, g.matmul_bt(bv));
                    }
                    if nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, av.matmul_at(&g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, g.matmul(bv));
                    }
                    if nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, g.matmul_at(av));
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-T::one()));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, g.zip_map(bv, |x, y| x * y));
                    }
                    if nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, g.zip_map(av, |x, y| x * y));
                    }
                }
                Op::Affine(a, mul) => accumulate(&mut grads, *a, g.scale(*mul)),
                Op::AddRow(a, b) => {
                    if nodes[*b].requires_grad {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (acc, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *acc += x;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::ScaleRows(a, scales) => {
                    let mut ga = g;
                    for (r, &s) in scales.iter().enumerate() {
                        for x in ga.row_mut(r) {
                            *x *= s;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RepeatRows(a, times) => {
                    let src = &nodes[*a].value;
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        let dst = ga.row_mut(r / times);
                        for (acc, &x) in dst.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, ids) => {
                    let src = &nodes[*a].value;
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = ga.row_mut(id);
                        for (acc, &x) in dst.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let n = T::lit(y.cols() as f64);
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mean_g = gr.iter().copied().sum::<T>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        let s = inv_std[r];
                        for ((out, &gy), &yy) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *out = s * (gy - mean_g - yy * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let x = &nodes[*a].value;
                    let ga = g.zip_map(x, |gy, xx| {
                        let s = sigmoid(xx);
                        gy * s * (T::one() + xx * (T::one() - s))
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let x = &nodes[*a].value;
                    accumulate(&mut grads, *a, g.zip_map(x, |gy, xx| gy * sigmoid(xx)));
                }
                Op::MaskedSoftmax(a) => {
                    let p = &node.value;
                    let mut ga = Tensor::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: T = pr.iter().zip(gr).map(|(&x, &y)| x * y).sum();
                        for ((out, &pp), &gg) in ga.row_mut(r).iter_mut().zip(pr).zip(gr) {
                            *out = pp * (gg - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let src = &nodes[*a].value;
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let src = &nodes[*a].value;
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    let w = src.cols();
                    ga.data_mut()[start * w..(start + g.rows()) * w].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        if nodes[p].requires_grad {
                            accumulate(&mut grads, p, g.slice_cols(offset, w));
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = nodes[p].value.rows();
                        if nodes[p].requires_grad {
                            accumulate(&mut grads, p, g.slice_rows(offset, h));
                        }
                        offset += h;
                    }
                }
                Op::Sum(a) => {
                    let src = &nodes[*a].value;
                    accumulate(&mut grads, *a, Tensor::full(src.rows(), src.cols(), g.item()));
                }
                Op::SumSq(a) => {
                    let two_g = g.item() + g.item();
                    accumulate(&mut grads, *a, nodes[*a].value.scale(two_g));
                }
                Op::MeanRows(a) => {
                    let src = &nodes[*a].value;
                    let inv = T::one() / T::lit(src.rows() as f64);
                    let ga = Tensor::from_fn(src.rows(), src.cols(), |_, c| g.get(0, c) * inv);
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, targets, probs) => {
                    let inv = g.item() / T::lit(targets.len() as f64);
                    let mut ga = (**probs).clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = ga.get(r, t) - T::one();
                        ga.set(r, t, v);
                    }
                    accumulate(&mut grads, *a, ga.scale(inv));
                }
            }
        }
        Gradients { grads }
    }
}

fn parents<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::Affine(a, _)
        | Op::ScaleRows(a, _)
        | Op::RepeatRows(a, _)
        | Op::GatherRows(a, _)
        | Op::LayerNorm(a, _)
        | Op::Silu(a)
        | Op::Softplus(a)
        | Op::MaskedSoftmax(a)
        | Op::SliceCols(a, _)
        | Op::SliceRows(a, _)
        | Op::Sum(a)
        | Op::SumSq(a)
        | Op::MeanRows(a)
        | Op::CrossEntropy(a, _, _) => vec![*a],
        Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf, `None` if the leaf is unreachable or frozen.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zeros when unreachable.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let v = var.value();
                Tensor::zeros(v.rows(), v.cols())
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    /// Stop-gradient: a new leaf with the same value.
    pub fn detach(&self) -> Var<'t, T> {
        let v = self.value();
        let mut nodes = self.tape.nodes.borrow_mut();
        nodes.push(Node { value: v, op: Op::Leaf, requires_grad: false });
        Var { tape: self.tape, id: nodes.len() - 1 }
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().matmul(&other.value());
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    /// `self @ other^T`.
    pub fn matmul_bt(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().matmul_bt(&other.value());
        self.binary(other, v, Op::MatMulBt(self.id, other.id))
    }

    pub fn add(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().add(&other.value());
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().sub(&other.value());
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    /// `mul * self + offset`.
    pub fn affine(&self, mul: T, offset: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * mul + offset);
        self.unary(v, Op::Affine(self.id, mul))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        self.affine(s, T::zero())
    }

    /// Broadcast-add a `[1, n]` row to every row.
    pub fn add_row(&self, bias: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = bias.value();
        assert_eq!(b.rows(), 1, "add_row expects a single-row bias");
        assert_eq!(a.cols(), b.cols(), "add_row width mismatch");
        let mut v = (*a).clone();
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.binary(bias, v, Op::AddRow(self.id, bias.id))
    }

    /// Multiply row `r` by the constant `scales[r]`.
    pub fn scale_rows(&self, scales: Vec<T>) -> Var<'t, T> {
        let mut v = (*self.value()).clone();
        assert_eq!(scales.len(), v.rows(), "scale_rows length mismatch");
        for (r, &s) in scales.iter().enumerate() {
            for x in v.row_mut(r) {
                *x *= s;
            }
        }
        self.unary(v, Op::ScaleRows(self.id, Rc::new(scales)))
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Var<'t, T> {
        let a = self.value();
        let mut data = Vec::with_capacity(a.len() * times);
        for r in 0..a.rows() {
            for _ in 0..times {
                data.extend_from_slice(a.row(r));
            }
        }
        let v = Tensor::from_vec(a.rows() * times, a.cols(), data);
        self.unary(v, Op::RepeatRows(self.id, times))
    }

    /// Rows of `self` selected by index (embedding lookup).
    pub fn gather_rows(&self, ids: Vec<usize>) -> Var<'t, T> {
        let a = self.value();
        let mut data = Vec::with_capacity(ids.len() * a.cols());
        for &id in &ids {
            data.extend_from_slice(a.row(id));
        }
        let v = Tensor::from_vec(ids.len(), a.cols(), data);
        self.unary(v, Op::GatherRows(self.id, Rc::new(ids)))
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&self) -> Var<'t, T> {
        let a = self.value();
        let n = T::lit(a.cols() as f64);
        let eps = T::lit(LN_EPS);
        let mut out = Tensor::zeros(a.rows(), a.cols());
        let mut inv_std = Vec::with_capacity(a.rows());
        for r in 0..a.rows() {
            let row = a.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            inv_std.push(s);
            for (o, &x) in out.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * s;
            }
        }
        self.unary(out, Op::LayerNorm(self.id, Rc::new(inv_std)))
    }

    pub fn silu(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.unary(v, Op::Silu(self.id))
    }

    pub fn softplus(&self) -> Var<'t, T> {
        let v = self.value().map(softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    /// Row-wise softmax restricted to entries where `allowed` is true.
    ///
    /// A row with no allowed entry yields all zeros.
    pub fn masked_softmax(&self, allowed: Option<&[bool]>) -> Var<'t, T> {
        let a = self.value();
        let cols = a.cols();
        if let Some(m) = allowed {
            assert_eq!(m.len(), a.len(), "mask size mismatch");
        }
        let mut out = Tensor::zeros(a.rows(), cols);
        for r in 0..a.rows() {
            let row = a.row(r);
            let ok = |c: usize| allowed.map_or(true, |m| m[r * cols + c]);
            let mut max = T::neg_infinity();
            for (c, &x) in row.iter().enumerate() {
                if ok(c) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            let dst = out.row_mut(r);
            for (c, &x) in row.iter().enumerate() {
                if ok(c) {
                    let e = (x - max).exp();
                    dst[c] = e;
                    total += e;
                }
            }
            for x in dst.iter_mut() {
                *x /= total;
            }
        }
        self.unary(out, Op::MaskedSoftmax(self.id))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t, T> {
        let v = self.value().slice_cols(start, len);
        self.unary(v, Op::SliceCols(self.id, start))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t, T> {
        let v = self.value().slice_rows(start, len);
        self.unary(v, Op::SliceRows(self.id, start))
    }

    pub fn concat_cols(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_cols(&refs);
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg)
    }

    pub fn concat_rows(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_rows(&refs);
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg)
    }

    pub fn sum(&self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    pub fn sum_sq(&self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sq_norm());
        self.unary(v, Op::SumSq(self.id))
    }

    /// Mean squared error against `target`, averaged over all elements.
    pub fn mse(&self, target: Var<'t, T>) -> Var<'t, T> {
        let n = self.value().len();
        self.sub(target).sum_sq().scale(T::one() / T::lit(n as f64))
    }

    /// Column-wise mean, producing `[1, cols]`.
    pub fn mean_rows(&self) -> Var<'t, T> {
        let a = self.value();
        let inv = T::one() / T::lit(a.rows() as f64);
        let mut out = Tensor::zeros(1, a.cols());
        for r in 0..a.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(a.row(r)) {
                *o += x;
            }
        }
        let out = out.scale(inv);
        self.unary(out, Op::MeanRows(self.id))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&self, targets: Vec<usize>) -> Var<'t, T> {
        let a = self.value();
        assert_eq!(targets.len(), a.rows(), "cross_entropy target count mismatch");
        let mut probs = Tensor::zeros(a.rows(), a.cols());
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = a.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[t];
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        let v = Tensor::scalar(total / T::lit(targets.len() as f64));
        self.unary(v, Op::CrossEntropy(self.id, Rc::new(targets), Rc::new(probs)))
    }
}

/// Central-difference derivative of `f` at `x` along a single coordinate.
pub fn central_difference<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, index: usize, h: T) -> T {
    let mut plus = x.clone();
    plus.data_mut()[index] += h;
    let mut minus = x.clone();
    minus.data_mut()[index] -= h;
    (f(&plus) - f(&minus)) / (h + h)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_unary(build: impl for<'t> Fn(Var<'t, f64>) -> Var<'t, f64>, rows: usize, cols: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(rows, cols, 1.0, &mut rng);
        let w = Tensor::<f64>::randn(rows, cols, 1.0, &mut rng);
        let objective = |xv: &Tensor<f64>| {
            let tape = Tape::new();
            let xs = tape.constant(xv.clone());
            let y = build(xs);
            let wv = tape.constant(w.clone());
            // Weighted reduction keeps the check sensitive to every output entry.
            let yv = y.value();
            if yv.shape() == wv.shape() {
                y.mul(wv).sum().value().item()
            } else {
                y.sum().value().item()
            }
        };
        let tape = Tape::new();
        let xs = tape.param(x.clone());
        let y = build(xs);
        let loss = if y.shape() == w.shape() { y.mul(tape.constant(w.clone())).sum() } else { y.sum() };
        let grads = tape.backward(loss);
        let g = grads.get_or_zeros(xs);
        for i in 0..x.len() {
            let fd = central_difference(objective, &x, i, 1e-6);
            let rel = relative_error(g.data()[i], fd, 1e-6);
            assert!(rel < 1e-5, "entry {i}: analytic {} vs fd {fd}", g.data()[i]);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        check_unary(|x| x.layer_norm(), 3, 5, 1);
    }

    #[test]
    fn silu_and_softplus_gradients() {
        check_unary(|x| x.silu(), 2, 4, 2);
        check_unary(|x| x.softplus(), 2, 4, 3);
    }

    #[test]
    fn masked_softmax_gradient() {
        let mask = vec![true, false, true, true, true, true, false, false, false, true, true, false];
        check_unary(move |x| x.masked_softmax(Some(&mask)), 3, 4, 4);
    }

    #[test]
    fn cross_entropy_gradient() {
        check_unary(|x| x.cross_entropy(vec![0, 2, 1]), 3, 3, 5);
    }

    #[test]
    fn structural_ops_gradients() {
        check_unary(|x| x.repeat_rows(3), 2, 3, 6);
        check_unary(|x| x.gather_rows(vec![1, 1, 0]), 2, 3, 7);
        check_unary(|x| x.mean_rows(), 4, 3, 8);
        check_unary(|x| x.slice_cols(1, 2), 3, 4, 9);
        check_unary(|x| x.slice_rows(1, 2), 3, 4, 10);
        check_unary(|x| x.scale_rows(vec![0.5, -2.0, 3.0]), 3, 2, 11);
        check_unary(|x| x.affine(-1.5, 0.25).sum_sq(), 2, 2, 12);
        check_unary(|x| Var::concat_cols(&[x, x.scale(2.0)]), 2, 2, 13);
        check_unary(|x| Var::concat_rows(&[x, x.silu()]), 2, 2, 14);
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let b = Tensor::<f64>::randn(4, 3, 1.0, &mut rng);
        let bias = Tensor::<f64>::randn(1, 3, 1.0, &mut rng);
        check_unary(
            move |x| {
                let t = x.tape();
                x.matmul(t.constant(b.clone())).add_row(t.constant(bias.clone()))
            },
            2,
            4,
            21,
        );
        let c = Tensor::<f64>::randn(5, 4, 1.0, &mut rng);
        check_unary(move |x| x.matmul_bt(x.tape().constant(c.clone())), 2, 4, 22);
        check_unary(|x| x.matmul_bt(x), 3, 2, 23);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.mul(x.detach());
        let grads = tape.backward(y);
        // d/dx (x * sg[x]) = sg[x] = 3
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn all_masked_row_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let p = x.masked_softmax(Some(&[false, false]));
        assert_eq!(p.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1.0f64) - 1.313_261_687_518_222_7).abs() < 1e-15);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
    }
}
