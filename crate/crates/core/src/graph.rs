//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse, accumulating gradients into the nodes' inputs
//! and finally into the [`ParamStore`] entries the graph was built from.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Op identifiers, used for diagnostics and derivative fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    BatchMatMul,
    Conv3d,
    AvgPool2,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    Abs,
    Square,
    Clamp,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    Concat,
    Slice,
    Reshape,
    Permute,
    Softmax,
    L2Normalize,
    Sort,
    MaxAxis,
}

impl OpKind {
    /// Every op with a derivative.
    pub const DIFFERENTIABLE: [OpKind; 30] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Conv3d,
        OpKind::AvgPool2,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Clamp,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::MeanAxis,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Softmax,
        OpKind::L2Normalize,
        OpKind::Sort,
        OpKind::MaxAxis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Conv3d => "conv3d",
            OpKind::AvgPool2 => "avg_pool2",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Clamp => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Softmax => "softmax",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Sort => "sort",
            OpKind::MaxAxis => "max_axis",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

/// Norm below which [`Graph::l2_normalize`] emits the zero vector.
pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnOp {
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    Abs,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary(BinOp, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        pad: [usize; 3],
    },
    AvgPool2(Var),
    Unary(UnOp, Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    L2Normalize(Var, Vec<f64>),
    Sort(Var, Vec<usize>),
    MaxAxis(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf | Op::Param(_) => OpKind::Leaf,
            Op::Binary(BinOp::Add, ..) => OpKind::Add,
            Op::Binary(BinOp::Sub, ..) => OpKind::Sub,
            Op::Binary(BinOp::Mul, ..) => OpKind::Mul,
            Op::Binary(BinOp::Div, ..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul(..) => OpKind::BatchMatMul,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::AvgPool2(_) => OpKind::AvgPool2,
            Op::Unary(u, _) => match u {
                UnOp::Exp => OpKind::Exp,
                UnOp::Ln => OpKind::Ln,
                UnOp::Tanh => OpKind::Tanh,
                UnOp::Sigmoid => OpKind::Sigmoid,
                UnOp::Relu => OpKind::Relu,
                UnOp::Abs => OpKind::Abs,
                UnOp::Square => OpKind::Square,
            },
            Op::Clamp(..) => OpKind::Clamp,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Softmax(_) => OpKind::Softmax,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::Sort(..) => OpKind::Sort,
            Op::MaxAxis(..) => OpKind::MaxAxis,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a loss with respect to every graph node that needed one.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `kind` derivative is deliberately doubled. Test hook
    /// for gradient-checker negative controls.
    pub fn with_fault(kind: OpKind) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported through [`Gradients`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; backward accumulates into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let kind = op.kind();
        if !value.all_finite() {
            return Err(Error::NonFinite(kind));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise with broadcasting ----

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let out_shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let mut out = vec![0.0; numel(&out_shape)];
        if ta.shape() == tb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(ta.data()).zip(tb.data()) {
                *o = f(x, y);
            }
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push(value, Op::Binary(op, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = map(self.value(a), |x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let value = map(self.value(a), |x| x + offset);
        self.push(value, Op::AddScalar(a), &[a])
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match op {
            UnOp::Exp => libm::exp,
            UnOp::Ln => libm::log,
            UnOp::Tanh => libm::tanh,
            UnOp::Sigmoid => sigmoid,
            UnOp::Relu => |x| if x > 0.0 { x } else { 0.0 },
            UnOp::Abs => libm::fabs,
            UnOp::Square => |x| x * x,
        };
        let value = map(self.value(a), f);
        self.push(value, Op::Unary(op, a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Ln, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Square, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        let value = map(self.value(a), |x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi), &[a])
    }

    // ---- linear algebra ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_nn(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(&[bs, m, n], out)?;
        self.push(value, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Stride-1 3D convolution with zero padding.
    ///
    /// `input` is `[N, Ci, D, H, W]`, `weight` is `[Co, Ci, KD, KH, KW]` and
    /// `bias` is `[Co]`; `pad` is applied symmetrically per spatial axis.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, pad: [usize; 3]) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geo = ConvGeometry::new(x.shape(), w.shape(), pad)?;
        if b.shape() != [geo.co] {
            return Err(shape_err("conv3d bias", b.shape(), &[geo.co]));
        }
        let mut out = vec![0.0; geo.out_len()];
        geo.forward(x.data(), w.data(), b.data(), &mut out);
        let value = Tensor::new(&geo.out_shape(), out)?;
        self.push(
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                pad,
            },
            &[input, weight, bias],
        )
    }

    /// 2x2 average pooling over the last two axes (both must be even).
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        let r = s.len();
        if r < 2 || s[r - 1] % 2 != 0 || s[r - 2] % 2 != 0 {
            return Err(shape_err("avg_pool2", s, &[2, 2]));
        }
        let (h, w) = (s[r - 2], s[r - 1]);
        let planes = numel(&s[..r - 2]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; planes * ho * wo];
        let d = t.data();
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let r0 = 2 * i * w + 2 * j;
                    dst[i * wo + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r0 + w] + src[r0 + w + 1]);
                }
            }
        }
        let mut shape = s.to_vec();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::AvgPool2(a), &[a])
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(a);
        let (outer, n, inner) = split_axis(t.shape(), axis, "reduce_axis")?;
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..n {
                let row = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let scale = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        let op = if mean {
            Op::MeanAxis(a, axis)
        } else {
            Op::SumAxis(a, axis)
        };
        self.push(value, op, &[a])
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Maximum over `axis`, removing it. Ties go to the lowest index; the
    /// backward pass routes the whole gradient to that element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, n, inner) = split_axis(t.shape(), axis, "max_axis")?;
        if n == 0 {
            return Err(Error::invalid("max over empty axis"));
        }
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for k in 1..n {
                    let idx = (o * n + k) * inner + i;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = d[best];
                arg[o * inner + i] = best;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::MaxAxis(a, arg), &[a])
    }

    /// Ascending sort along the last axis. Equal values keep source order,
    /// so ties resolve to the lowest source index first.
    pub fn sort(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.is_empty() {
            return Err(Error::invalid("sort of a scalar"));
        }
        let n = s[s.len() - 1];
        let rows = if n == 0 { 0 } else { t.len() / n };
        let d = t.data();
        let mut out = vec![0.0; t.len()];
        let mut perm = vec![0usize; t.len()];
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            order.clear();
            order.extend(0..n);
            order.sort_by(|&i, &j| row[i].total_cmp(&row[j]));
            for (pos, &src) in order.iter().enumerate() {
                out[r * n + pos] = row[src];
                perm[r * n + pos] = r * n + src;
            }
        }
        let value = Tensor::new(s, out)?;
        self.push(value, Op::Sort(a, perm), &[a])
    }

    // ---- structural ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", s, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let in_strides = strides(s);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let d = t.data();
        let mut out = vec![0.0; t.len()];
        for_each_strided(&out_shape, &src_strides, |o, i| out[o] = d[i]);
        let value = Tensor::new(&out_shape, out)?;
        self.push(value, Op::Permute(a, perm.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// `len` entries of `axis` starting at `start`; the axis is kept.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, n, inner) = split_axis(t.shape(), axis, "slice")?;
        if start + len > n {
            return Err(shape_err("slice", t.shape(), &[axis, start, len]));
        }
        let d = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Slice(a, axis, start), &[a])
    }

    // ---- normalizations ----

    /// Softmax along the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = last_extent(t.shape(), "softmax")?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - m);
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Unit-L2 normalization along the last axis. Rows with norm below
    /// [`NORMALIZE_EPS`] become exactly zero and pass no gradient.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = last_extent(t.shape(), "l2_normalize")?;
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if norm < NORMALIZE_EPS {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            norms.push(norm);
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push(value, Op::L2Normalize(a, norms), &[a])
    }

    // ---- backward ----

    /// Accumulates d`loss`/d`param` into every parameter reachable from
    /// `loss`. Parameter gradients are *added to*; call
    /// [`ParamStore::zero_grad`] between independent passes.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if let Op::Param(id) = node.op {
                let p = store.get_mut(id);
                p.grad.add_assign(&g);
                grads[idx] = Some(g);
                continue;
            }
            if self.fault.is_some() && self.fault == Some(node.op.kind()) {
                g.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let same = ta.shape() == tb.shape();
                let sa = broadcast_strides(ta.shape(), y.shape());
                let sb = broadcast_strides(tb.shape(), y.shape());
                let (da, db, gd) = (ta.data(), tb.data(), g.data());
                if self.wants(*a) {
                    let mut ga = vec![0.0; ta.len()];
                    let mut f = |o: usize, ia: usize, ib: usize| {
                        ga[ia] += match op {
                            BinOp::Add | BinOp::Sub => gd[o],
                            BinOp::Mul => gd[o] * db[ib],
                            BinOp::Div => gd[o] / db[ib],
                        }
                    };
                    if same {
                        (0..gd.len()).for_each(|i| f(i, i, i));
                    } else {
                        for_each_broadcast(y.shape(), &sa, &sb, f);
                    }
                    accumulate(grads, *a, Tensor::new(ta.shape(), ga)?);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; tb.len()];
                    let mut f = |o: usize, ia: usize, ib: usize| {
                        gb[ib] += match op {
                            BinOp::Add => gd[o],
                            BinOp::Sub => -gd[o],
                            BinOp::Mul => gd[o] * da[ia],
                            BinOp::Div => -gd[o] * da[ia] / (db[ib] * db[ib]),
                        }
                    };
                    if same {
                        (0..gd.len()).for_each(|i| f(i, i, i));
                    } else {
                        for_each_broadcast(y.shape(), &sa, &sb, f);
                    }
                    accumulate(grads, *b, Tensor::new(tb.shape(), gb)?);
                }
            }
            Op::Scale(a, factor) => {
                accumulate(grads, *a, map(g, |v| v * factor));
            }
            Op::AddScalar(a) => {
                accumulate(grads, *a, g.clone());
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), tb.data(), &mut ga, m, n, k);
                    accumulate(grads, *a, Tensor::new(ta.shape(), ga)?);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(ta.data(), g.data(), &mut gb, m, k, n);
                    accumulate(grads, *b, Tensor::new(tb.shape(), gb)?);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_nt(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, Tensor::new(ta.shape(), ga)?);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm_tn(
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    accumulate(grads, *b, Tensor::new(tb.shape(), gb)?);
                }
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                pad,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let geo = ConvGeometry::new(x.shape(), w.shape(), *pad)?;
                let gx = self.wants(*input).then(|| vec![0.0; x.len()]);
                let gw = self.wants(*weight).then(|| vec![0.0; w.len()]);
                let (gx, gw) = geo.backward(x.data(), w.data(), g.data(), gx, gw);
                if let Some(gx) = gx {
                    accumulate(grads, *input, Tensor::new(x.shape(), gx)?);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *weight, Tensor::new(w.shape(), gw)?);
                }
                if self.wants(*bias) {
                    let plane = geo.out_len() / (geo.n * geo.co);
                    let mut gb = vec![0.0; geo.co];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        gb[i % geo.co] += chunk.iter().sum::<f64>();
                    }
                    accumulate(grads, *bias, Tensor::new(&[geo.co], gb)?);
                }
            }
            Op::AvgPool2(a) => {
                let s = self.value(*a).shape();
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = vec![0.0; numel(s)];
                for (p, gp) in g.data().chunks(ho * wo).enumerate() {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = 0.25 * gp[i * wo + j];
                            let r0 = 2 * i * w + 2 * j;
                            dst[r0] += v;
                            dst[r0 + 1] += v;
                            dst[r0 + w] += v;
                            dst[r0 + w + 1] += v;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(s, gx)?);
            }
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let gx: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| {
                        gv * match op {
                            UnOp::Exp => yv,
                            UnOp::Ln => 1.0 / xv,
                            UnOp::Tanh => 1.0 - yv * yv,
                            UnOp::Sigmoid => yv * (1.0 - yv),
                            UnOp::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnOp::Abs => {
                                if xv > 0.0 {
                                    1.0
                                } else if xv < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnOp::Square => 2.0 * xv,
                        }
                    })
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape(), gx)?);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let gx = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape(), gx)?);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gv = g.data()[0] / x.len() as f64;
                accumulate(grads, *a, Tensor::full(x.shape(), gv));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let x = self.value(*a);
                let (outer, n, inner) = split_axis(x.shape(), *axis, "reduce_axis")?;
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(x.shape(), gx)?);
            }
            Op::MaxAxis(a, arg) | Op::Sort(a, arg) => {
                let x = self.value(*a);
                let mut gx = vec![0.0; x.len()];
                for (&src, &gv) in arg.iter().zip(g.data()) {
                    gx[src] += gv;
                }
                accumulate(grads, *a, Tensor::new(x.shape(), gx)?);
            }
            Op::Reshape(a) => {
                let s = self.value(*a).shape();
                accumulate(grads, *a, g.clone().reshape(s)?);
            }
            Op::Permute(a, perm) => {
                let x = self.value(*a);
                let in_strides = strides(x.shape());
                let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let mut gx = vec![0.0; x.len()];
                let gd = g.data();
                for_each_strided(y.shape(), &src_strides, |o, i| gx[i] += gd[o]);
                accumulate(grads, *a, Tensor::new(x.shape(), gx)?);
            }
            Op::Concat(parts, axis) => {
                let outer = numel(&y.shape()[..*axis]);
                let inner = numel(&y.shape()[axis + 1..]);
                let total = y.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let chunk = t.shape()[*axis] * inner;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            gp.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        accumulate(grads, p, Tensor::new(t.shape(), gp)?);
                    }
                    offset += chunk;
                }
            }
            Op::Slice(a, axis, start) => {
                let x = self.value(*a);
                let (outer, n, inner) = split_axis(x.shape(), *axis, "slice")?;
                let len = y.shape()[*axis];
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *a, Tensor::new(x.shape(), gx)?);
            }
            Op::Softmax(a) => {
                let n = *y.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; y.len()];
                for ((dst, yr), gr) in gx.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape(), gx)?);
            }
            Op::L2Normalize(a, norms) => {
                let n = *y.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; y.len()];
                for (((dst, yr), gr), &norm) in gx
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                    .zip(norms)
                {
                    if norm < NORMALIZE_EPS {
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) / norm;
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape(), gx)?);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn last_extent(shape: &[usize], op: &'static str) -> Result<usize> {
    match shape.last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(shape_err(op, shape, &[])),
    }
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(op, shape, &[axis]));
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, a, b)),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&n, &o), st)| if n == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Visits every output index with the matching offsets into two inputs.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn for_each_strided(out: &[usize], src: &[usize], mut f: impl FnMut(usize, usize)) {
    let zeros = vec![0usize; out.len()];
    for_each_broadcast(out, src, &zeros, |o, i, _| f(o, i));
}

/// `c += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, &gv) in c[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

struct ConvGeometry {
    n: usize,
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    co: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    pad: [usize; 3],
    od: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], pad: [usize; 3]) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 || x[1] != w[1] {
            return Err(shape_err("conv3d", x, w));
        }
        let out = |len: usize, k: usize, p: usize| (len + 2 * p).checked_sub(k).map(|v| v + 1);
        let (Some(od), Some(oh), Some(ow)) = (out(x[2], w[2], pad[0]), out(x[3], w[3], pad[1]), out(x[4], w[4], pad[2]))
        else {
            return Err(shape_err("conv3d", x, w));
        };
        Ok(ConvGeometry {
            n: x[0],
            ci: x[1],
            d: x[2],
            h: x[3],
            w: x[4],
            co: w[0],
            kd: w[2],
            kh: w[3],
            kw: w[4],
            pad,
            od,
            oh,
            ow,
        })
    }

    fn out_shape(&self) -> [usize; 5] {
        [self.n, self.co, self.od, self.oh, self.ow]
    }

    fn out_len(&self) -> usize {
        self.n * self.co * self.od * self.oh * self.ow
    }

    /// Valid `(out_lo, out_hi)` range along one axis for kernel offset `k`:
    /// input index is `out + k - pad`.
    fn range(out: usize, input: usize, k: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (input + pad).saturating_sub(k).min(out);
        (lo, hi.max(lo))
    }

    /// Calls `f(x_row_offset, out_row_offset, col_lo, col_hi, shift)` for every
    /// overlapping row pair of one `(n, co, ci, kd, kh, kw)` tap, where the
    /// input column is `out column + shift` (shift may be negative).
    #[allow(clippy::too_many_arguments)]
    fn for_each_row(
        &self,
        n: usize,
        co: usize,
        ci: usize,
        a: usize,
        b: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize, usize, isize),
    ) {
        let (d_lo, d_hi) = Self::range(self.od, self.d, a, self.pad[0]);
        let (h_lo, h_hi) = Self::range(self.oh, self.h, b, self.pad[1]);
        let (w_lo, w_hi) = Self::range(self.ow, self.w, c, self.pad[2]);
        if w_lo >= w_hi {
            return;
        }
        let shift = c as isize - self.pad[2] as isize;
        for od in d_lo..d_hi {
            let id = od + a - self.pad[0];
            for oh in h_lo..h_hi {
                let ih = oh + b - self.pad[1];
                let x_row = (((n * self.ci + ci) * self.d + id) * self.h + ih) * self.w;
                let o_row = (((n * self.co + co) * self.od + od) * self.oh + oh) * self.ow;
                f(x_row, o_row, w_lo, w_hi, shift);
            }
        }
    }

    fn weight_index(&self, co: usize, ci: usize, a: usize, b: usize, c: usize) -> usize {
        (((co * self.ci + ci) * self.kd + a) * self.kh + b) * self.kw + c
    }

    fn forward(&self, x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
        let plane = self.od * self.oh * self.ow;
        for n in 0..self.n {
            for co in 0..self.co {
                let base = (n * self.co + co) * plane;
                out[base..base + plane].iter_mut().for_each(|v| *v = bias[co]);
                for ci in 0..self.ci {
                    for a in 0..self.kd {
                        for b in 0..self.kh {
                            for c in 0..self.kw {
                                let wv = w[self.weight_index(co, ci, a, b, c)];
                                if wv == 0.0 {
                                    continue;
                                }
                                self.for_each_row(n, co, ci, a, b, c, |xr, or, lo, hi, shift| {
                                    let xs = (xr as isize + lo as isize + shift) as usize;
                                    let src = &x[xs..xs + (hi - lo)];
                                    for (o, &xv) in out[or + lo..or + hi].iter_mut().zip(src) {
                                        *o += wv * xv;
                                    }
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        g: &[f64],
        mut gx: Option<Vec<f64>>,
        mut gw: Option<Vec<f64>>,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        for n in 0..self.n {
            for co in 0..self.co {
                for ci in 0..self.ci {
                    for a in 0..self.kd {
                        for b in 0..self.kh {
                            for c in 0..self.kw {
                                let wi = self.weight_index(co, ci, a, b, c);
                                let wv = w[wi];
                                let mut acc = 0.0;
                                self.for_each_row(n, co, ci, a, b, c, |xr, or, lo, hi, shift| {
                                    let xs = (xr as isize + lo as isize + shift) as usize;
                                    let grow = &g[or + lo..or + hi];
                                    if gw.is_some() {
                                        acc += grow.iter().zip(&x[xs..xs + (hi - lo)]).map(|(p, q)| p * q).sum::<f64>();
                                    }
                                    if let Some(gx) = gx.as_mut() {
                                        for (d, &gv) in gx[xs..xs + (hi - lo)].iter_mut().zip(grow) {
                                            *d += wv * gv;
                                        }
                                    }
                                });
                                if let Some(gw) = gw.as_mut() {
                                    gw[wi] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_function_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let x = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(wv, x).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[3.0, 4.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[1.0, -2.0])).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.square(wv).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[2.0, -4.0]);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[1], &[3.0])).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let loss = g.sum(wv).unwrap();
            g.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.grad(w).data(), &[2.0]);
        store.zero_grad();
        assert_eq!(store.grad(w).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x, &mut store), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_surfaced() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[0.0]));
        assert_eq!(g.ln(x), Err(Error::NonFinite(OpKind::Ln)));
        let big = g.constant(t(&[1], &[1000.0]));
        assert_eq!(g.exp(big), Err(Error::NonFinite(OpKind::Exp)));
    }

    #[test]
    fn sort_routes_gradient_through_permutation() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.variable(t(&[4], &[3.0, 1.0, 2.0, 1.0]));
        let s = g.sort(x).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 1.0, 2.0, 3.0]);
        let wts = g.constant(t(&[4], &[10.0, 20.0, 30.0, 40.0]));
        let p = g.mul(s, wts).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss, &mut store).unwrap();
        // sorted order is sources (1, 3, 2, 0): the tie at 1.0 keeps index 1 first
        assert_eq!(grads.get(x).unwrap().data(), &[40.0, 10.0, 30.0, 20.0]);
    }

    #[test]
    fn max_routes_gradient_to_first_argmax() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 3], &[1.0, 5.0, 5.0, 2.0, 0.0, 2.0]));
        let m = g.max_axis(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[5.0, 2.0]);
        let loss = g.sum(m).unwrap();
        let grads = g.backward(loss, &mut store).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcasting_matches_explicit_expansion() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[1, 2, 1], &[10.0, 20.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 3]);
        assert_eq!(
            g.value(c).data(),
            &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0, 14.0, 15.0, 16.0, 24.0, 25.0, 26.0]
        );
        let bad = g.constant(Tensor::zeros(&[3, 2, 3]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn permute_and_concat_layouts() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let p = g.permute(a, &[1, 0]).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let c = g.concat(&[a, a], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 6]);
        assert_eq!(g.value(c).data()[3..6], [0.0, 1.0, 2.0]);
        let s = g.slice(c, 1, 2, 2).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 0.0, 5.0, 3.0]);
    }

    #[test]
    fn conv3d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 1, 3, 3], |i| i as f64));
        let w = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv3d(x, w, b, [0, 0, 0]).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let xs = [1usize, 2, 3, 4, 5];
        let ws = [2usize, 2, 2, 3, 3];
        let xt = Tensor::from_fn(&xs, |i| ((i * 7 % 11) as f64) - 5.0);
        let wt = Tensor::from_fn(&ws, |i| ((i * 5 % 7) as f64) * 0.1 - 0.3);
        let bt = t(&[2], &[0.5, -0.5]);
        let mut g = Graph::new();
        let (x, w, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
        let y = g.conv3d(x, w, b, [0, 1, 1]).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2, 4, 5]);
        for co in 0..2 {
            for od in 0..2 {
                for oh in 0..4 {
                    for ow in 0..5 {
                        let mut want = bt.data()[co];
                        for ci in 0..2 {
                            for a in 0..2 {
                                for bb in 0..3 {
                                    for c in 0..3 {
                                        let ih = oh as isize + bb as isize - 1;
                                        let iw = ow as isize + c as isize - 1;
                                        if ih < 0 || iw < 0 || ih >= 4 || iw >= 5 {
                                            continue;
                                        }
                                        want += wt.at(&[co, ci, a, bb, c])
                                            * xt.at(&[0, ci, od + a, ih as usize, iw as usize]);
                                    }
                                }
                            }
                        }
                        let got = g.value(y).at(&[0, co, od, oh, ow]);
                        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -700.0, 0.0, 700.0]));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_degenerate_row_is_zero() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss, &mut store).unwrap();
        assert_eq!(&grads.get(x).unwrap().data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
