//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every executed op as a node holding its output value
//! and the information its backward rule needs. Nodes are appended in
//! execution order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Shapes must match exactly. The only broadcasts are scalar-times-tensor
//! ([`Tape::mul_scalar`]) and adding a tensor whose shape equals the trailing
//! extents of the other operand ([`Tape::add_broadcast`], used for biases,
//! positional embeddings and the layer-norm affine).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};
use std::ops::Range;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Mul,
    AddBroadcast,
    MulScalar,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    MeanOver,
    Sum,
    ConcatAlong,
    SliceAlong,
    Permute,
    TransposeLast2,
    Reshape,
    SelectRows,
    BceWithLogits,
}

impl OpKind {
    /// Every op that carries a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 18] = [
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddBroadcast,
        OpKind::MulScalar,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::MeanOver,
        OpKind::Sum,
        OpKind::ConcatAlong,
        OpKind::SliceAlong,
        OpKind::Permute,
        OpKind::TransposeLast2,
        OpKind::Reshape,
        OpKind::SelectRows,
        OpKind::BceWithLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::AddBroadcast => "add_broadcast",
            OpKind::MulScalar => "mul_scalar",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::MeanOver => "mean_over",
            OpKind::Sum => "sum",
            OpKind::ConcatAlong => "concat_along",
            OpKind::SliceAlong => "slice_along",
            OpKind::Permute => "permute",
            OpKind::TransposeLast2 => "transpose_last2",
            OpKind::Reshape => "reshape",
            OpKind::SelectRows => "select_rows",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulScalar(Var, T),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    MeanOver { x: Var, axis: usize },
    Sum(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Permute { x: Var, axes: Vec<usize> },
    TransposeLast2(Var),
    Reshape(Var),
    SelectRows { a: Var, b: Var, take_a: Vec<bool> },
    Bce { logit: Var, target: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul(..) => OpKind::BatchMatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBroadcast(..) => OpKind::AddBroadcast,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::MeanOver { .. } => OpKind::MeanOver,
            Op::Sum(..) => OpKind::Sum,
            Op::Concat { .. } => OpKind::ConcatAlong,
            Op::Slice { .. } => OpKind::SliceAlong,
            Op::Permute { .. } => OpKind::Permute,
            Op::TransposeLast2(..) => OpKind::TransposeLast2,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::Bce { .. } => OpKind::BceWithLogits,
        }
    }
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Vec<T>>>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_index, in_index)` for every element of `in_shape` permuted by `axes`.
fn for_each_permuted(in_shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(in_shape);
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..total {
        f(dst, src);
        for d in (0..rank).rev() {
            counter[d] += 1;
            src += step[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            counter[d] = 0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_value<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: None, fault: None }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes of one kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Deliberately corrupts the backward rule of `kind` (upstream gradient
    /// scaled by 1.5). Only used as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!("variable {} is not on this tape", v.0)))
        }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>, op_name: &'static str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::SelectRows { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::MulScalar(x, _)
            | Op::SoftmaxRows(x)
            | Op::Gelu(x)
            | Op::MeanOver { x, .. }
            | Op::Sum(x)
            | Op::Slice { x, .. }
            | Op::Permute { x, .. }
            | Op::TransposeLast2(x)
            | Op::Reshape(x)
            | Op::Bce { logit: x, .. } => self.rg(*x),
            Op::LayerNorm { x, gain, bias, .. } => self.rg(*x) || self.rg(*gain) || self.rg(*bias),
            Op::Concat { inputs, .. } => inputs.iter().any(|v| self.rg(*v)),
        };
        self.nodes.push(Node { value, shape, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it participates in differentiation iff the tensor is tracked.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let tracked = t.is_tracked();
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), tracked)
    }

    /// Records a tracked leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), true)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, t.into_values(), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, shape, op: Op::Leaf, requires_grad: tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---------------------------------------------------------------- ops

    /// `[M, K] x [K, P] -> [M, P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * p];
        T::gemm(
            m,
            k,
            p,
            T::one(),
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (p as isize, 1),
            T::zero(),
            &mut out,
            (p as isize, 1),
        );
        self.push(Op::MatMul(a, b), vec![m, p], out, "matmul")
    }

    /// `[..., M, K] x [..., K, P] -> [..., M, P]` with identical leading extents.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::dim(format!("batch_matmul of {sa:?} and {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (m, k, p) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let mut out = vec![T::zero(); batch * m * p];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            T::gemm(
                m,
                k,
                p,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &bv[i * k * p..(i + 1) * k * p],
                (p as isize, 1),
                T::zero(),
                &mut out[i * m * p..(i + 1) * m * p],
                (p as isize, 1),
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, p]);
        self.push(Op::BatchMatMul(a, b), shape, out, "batch_matmul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{op} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push(Op::Add(a, b), self.shape(a).to_vec(), out, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push(Op::Mul(a, b), self.shape(a).to_vec(), out, "mul")
    }

    /// `a + b` where `b`'s shape equals the trailing extents of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(format!("add_broadcast of {sa:?} and {sb:?}")));
        }
        let bv = self.value(b);
        let width = bv.len();
        let out = self
            .value(a)
            .chunks_exact(width)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        self.push(Op::AddBroadcast(a, b), self.shape(a).to_vec(), out, "add_broadcast")
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(Op::MulScalar(a, s), self.shape(a).to_vec(), out, "mul_scalar")
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("rank >= 1");
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.push(Op::SoftmaxRows(a), shape, out, "softmax_rows")
    }

    /// Normalizes each row over the last axis, then applies `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layer_norm over {shape:?} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let n = T::of(d as f64);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = numel(&shape) / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.value(x).chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(Op::LayerNorm { x, gain, bias, xhat, rstd }, shape, out, "layer_norm")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&x| gelu_value(x)).collect();
        self.push(Op::Gelu(a), self.shape(a).to_vec(), out, "gelu")
    }

    /// Mean along `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean_over(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("mean_over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let scale = T::one() / T::of(len as f64);
        let av = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * scale);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(Op::MeanOver { x: a, axis }, out_shape, out, "mean_over")
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let total = self.value(a).iter().copied().sum();
        self.push(Op::Sum(a), vec![1], vec![total], "sum")
    }

    pub fn concat_along(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!("concat along {axis} of {base:?} and {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Op::Concat { inputs: inputs.to_vec(), axis }, shape, out, "concat_along")
    }

    pub fn slice_along(&mut self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || range.start >= range.end || range.end > shape[axis] {
            return Err(Error::dim(format!("slice {range:?} along axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = range.len();
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let from = (o * len + range.start) * inner;
            out.extend_from_slice(&av[from..from + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        self.push(Op::Slice { x: a, axis, start: range.start }, out_shape, out, "slice_along")
    }

    /// Token-axis slice of a `[..., T, D]` tensor.
    pub fn slice_tokens(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::dim("slice_tokens needs rank >= 2"));
        }
        self.slice_along(a, rank - 2, range)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&x| x < shape.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(Error::dim(format!("permutation {axes:?} of {shape:?}")));
        }
        let av = self.value(a);
        let mut out = vec![T::zero(); av.len()];
        for_each_permuted(&shape, axes, |dst, src| out[dst] = av[src]);
        let out_shape = axes.iter().map(|&x| shape[x]).collect();
        self.push(Op::Permute { x: a, axes: axes.to_vec() }, out_shape, out, "permute")
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::dim(format!("transpose_last2 of {shape:?}")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        let av = self.value(a);
        let mut out = vec![T::zero(); av.len()];
        for_each_permuted(&shape, &axes, |dst, src| out[dst] = av[src]);
        let out_shape = axes.iter().map(|&x| shape[x]).collect();
        self.push(Op::TransposeLast2(a), out_shape, out, "transpose_last2")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        if numel(shape) != numel(self.shape(a)) || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("reshape {:?} to {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        self.push(Op::Reshape(a), shape.to_vec(), out, "reshape")
    }

    /// Row-wise choice between two equally shaped tensors: row `r` (over the
    /// last axis) comes from `a` when `take_a[r]`, otherwise from `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        self.same_shape(a, b, "select_rows")?;
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("rank >= 1");
        if take_a.len() * cols != numel(&shape) {
            return Err(Error::dim(format!(
                "select_rows mask of length {} for shape {shape:?}",
                take_a.len()
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.len());
        for (r, &pick) in take_a.iter().enumerate() {
            let src = if pick { av } else { bv };
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        self.push(Op::SelectRows { a, b, take_a: take_a.to_vec() }, shape, out, "select_rows")
    }

    /// Mean binary cross-entropy of logits against 0/1 targets, in the
    /// `max(l, 0) - l*y + ln(1 + exp(-|l|))` form.
    pub fn bce_with_logits(&mut self, logit: Var, target: &Tensor<T>) -> Result<Var> {
        self.check(logit)?;
        if self.shape(logit) != target.shape() {
            return Err(Error::dim(format!(
                "bce_with_logits of {:?} against targets {:?}",
                self.shape(logit),
                target.shape()
            )));
        }
        if let Some(bad) = target.values().iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::Validation(format!("target {bad} is not 0 or 1")));
        }
        let n = T::of(target.len() as f64);
        let total: T = self
            .value(logit)
            .iter()
            .zip(target.values())
            .map(|(&l, &y)| l.max(T::zero()) - l * y + (-l.abs()).exp().ln_1p())
            .sum();
        let op = Op::Bce { logit, target: target.values().to_vec() };
        self.push(op, vec![1], vec![total / n], "bce_with_logits")
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar loss. Gradients are then available
    /// through [`Tape::grad`]. A second call requires [`Tape::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.grads.is_some() {
            return Err(Error::Contract("backward already ran on this tape; reset gradients first".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Contract("loss does not depend on any tracked leaf".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if self.fault == Some(self.nodes[id].op.kind()) {
                let bad: Vec<T> = g.iter().map(|&v| v * T::of(1.5)).collect();
                self.backprop_node(id, &bad, &mut grads);
            } else {
                self.backprop_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { op: "backward" });
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward pass with respect to `v`, or `None`
    /// when `v` does not depend on a tracked leaf or backward has not run.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.as_ref()?;
        let node = self.nodes.get(v.0)?;
        if !node.requires_grad {
            return None;
        }
        let values = grads[v.0].clone().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
        Some(Tensor::new(node.shape.clone(), values).expect("node shapes are valid"))
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, p) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let da = accumulate(&mut grads[a.0], m * k);
                    // dA = dC * B^T
                    T::gemm(m, p, k, T::one(), g, (p as isize, 1), self.value(*b), (1, p as isize), T::one(), da, (k as isize, 1));
                }
                if self.rg(*b) {
                    let db = accumulate(&mut grads[b.0], k * p);
                    // dB = A^T * dC
                    T::gemm(k, m, p, T::one(), self.value(*a), (1, k as isize), g, (p as isize, 1), T::one(), db, (p as isize, 1));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let batch = numel(&sa[..r - 2]);
                let (m, k, p) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = accumulate(&mut grads[a.0], batch * m * k);
                    for i in 0..batch {
                        T::gemm(
                            m, p, k, T::one(),
                            &g[i * m * p..(i + 1) * m * p], (p as isize, 1),
                            &bv[i * k * p..(i + 1) * k * p], (1, p as isize),
                            T::one(), &mut da[i * m * k..(i + 1) * m * k], (k as isize, 1),
                        );
                    }
                }
                if self.rg(*b) {
                    let db = accumulate(&mut grads[b.0], batch * k * p);
                    for i in 0..batch {
                        T::gemm(
                            k, m, p, T::one(),
                            &av[i * m * k..(i + 1) * m * k], (1, k as isize),
                            &g[i * m * p..(i + 1) * m * p], (p as isize, 1),
                            T::one(), &mut db[i * k * p..(i + 1) * k * p], (p as isize, 1),
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        let d = accumulate(&mut grads[v.0], g.len());
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.rg(*v) {
                        let ov = self.value(*other);
                        let d = accumulate(&mut grads[v.0], g.len());
                        for ((d, &g), &o) in d.iter_mut().zip(g).zip(ov) {
                            *d = *d + g * o;
                        }
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.rg(*a) {
                    let d = accumulate(&mut grads[a.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
                if self.rg(*b) {
                    let width = self.value(*b).len();
                    let d = accumulate(&mut grads[b.0], width);
                    for row in g.chunks_exact(width) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            Op::MulScalar(a, s) => {
                if self.rg(*a) {
                    let d = accumulate(&mut grads[a.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *s);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.rg(*a) {
                    let cols = *node.shape.last().expect("rank >= 1");
                    let d = accumulate(&mut grads[a.0], g.len());
                    for ((drow, grow), yrow) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(node.value.chunks_exact(cols))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.shape.last().expect("rank >= 1");
                let gv = self.value(*gain);
                if self.rg(*gain) {
                    let dg = accumulate(&mut grads[gain.0], d);
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let db = accumulate(&mut grads[bias.0], d);
                    for grow in g.chunks_exact(d) {
                        db.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                    }
                }
                if self.rg(*x) {
                    let n = T::of(d as f64);
                    let dx = accumulate(&mut grads[x.0], g.len());
                    let mut dh = vec![T::zero(); d];
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    let d = accumulate(&mut grads[a.0], g.len());
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d = *d + g * gelu_derivative(x);
                    }
                }
            }
            Op::MeanOver { x, axis } => {
                if self.rg(*x) {
                    let shape = self.shape(*x);
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let scale = T::one() / T::of(len as f64);
                    let d = accumulate(&mut grads[x.0], outer * len * inner);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g * scale);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let n = self.value(*a).len();
                    let d = accumulate(&mut grads[a.0], n);
                    d.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let width = self.shape(*v)[*axis];
                    if self.rg(*v) {
                        let d = accumulate(&mut grads[v.0], outer * width * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + width) * inner];
                            let dst = &mut d[o * width * inner..(o + 1) * width * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.rg(*x) {
                    let in_shape = self.shape(*x);
                    let (outer, len, inner) = split_axis(in_shape, *axis);
                    let width = node.shape[*axis];
                    let d = accumulate(&mut grads[x.0], outer * len * inner);
                    for o in 0..outer {
                        let from = (o * len + start) * inner;
                        let dst = &mut d[from..from + width * inner];
                        let src = &g[o * width * inner..(o + 1) * width * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            Op::Permute { x, axes } => {
                if self.rg(*x) {
                    let d = accumulate(&mut grads[x.0], g.len());
                    for_each_permuted(self.shape(*x), axes, |dst, src| d[src] = d[src] + g[dst]);
                }
            }
            Op::TransposeLast2(x) => {
                if self.rg(*x) {
                    let shape = self.shape(*x);
                    let r = shape.len();
                    let mut axes: Vec<usize> = (0..r).collect();
                    axes.swap(r - 2, r - 1);
                    let d = accumulate(&mut grads[x.0], g.len());
                    for_each_permuted(shape, &axes, |dst, src| d[src] = d[src] + g[dst]);
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let d = accumulate(&mut grads[x.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
            Op::SelectRows { a, b, take_a } => {
                let cols = *node.shape.last().expect("rank >= 1");
                for (v, want) in [(a, true), (b, false)] {
                    if !self.rg(*v) {
                        continue;
                    }
                    let d = accumulate(&mut grads[v.0], g.len());
                    for (r, &pick) in take_a.iter().enumerate() {
                        if pick == want {
                            let span = r * cols..(r + 1) * cols;
                            d[span.clone()].iter_mut().zip(&g[span]).for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                }
            }
            Op::Bce { logit, target } => {
                if self.rg(*logit) {
                    let n = T::of(target.len() as f64);
                    let lv = self.value(*logit);
                    let d = accumulate(&mut grads[logit.0], target.len());
                    for ((d, &l), &y) in d.iter_mut().zip(lv).zip(target) {
                        *d = *d + g[0] * (sigmoid(l) - y) / n;
                    }
                }
            }
        }
    }
}
