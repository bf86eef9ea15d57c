use super::kernels::{matmul_into, Transpose};
use super::{axis_split, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Second operand of an elementwise operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Operand {
    Tensor(Var),
    Scalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Scale,
    ClipMax,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    AddScalar(Var),
    Scale(Var, f64),
    ClipMax(Var, f64),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Tile {
        x: Var,
        times: usize,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        axis: Option<usize>,
    },
    Pick {
        x: Var,
        indices: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only tape of operations.
///
/// Node `k` only ever reads nodes with index `< k`, so reverse index order is
/// a valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum of `head` in index order followed by the values of `tail` in ascending
/// order. The result does not depend on how `tail` is permuted.
fn canonical_sum(head: f64, tail: &mut [f64]) -> f64 {
    tail.sort_unstable_by(f64::total_cmp);
    tail.iter().fold(head, |acc, x| acc + x)
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

    /// Registers an input tensor. Only leaves with `requires_grad` receive
    /// gradients from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf, present after a backward pass for
    /// every leaf that requires grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ---- elementwise ---------------------------------------------------

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Operand) -> Result<Var> {
        match (kind, b) {
            (ElementwiseKind::Add, Operand::Tensor(b)) => self.add(a, b),
            (ElementwiseKind::Add, Operand::Scalar(c)) => Ok(self.add_scalar(a, c)),
            (ElementwiseKind::Sub, Operand::Tensor(b)) => self.sub(a, b),
            (ElementwiseKind::Sub, Operand::Scalar(c)) => Ok(self.add_scalar(a, -c)),
            (ElementwiseKind::Mul, Operand::Tensor(b)) => self.mul(a, b),
            (ElementwiseKind::Mul | ElementwiseKind::Scale, Operand::Scalar(c)) => Ok(self.scale(a, c)),
            (ElementwiseKind::ClipMax, Operand::Scalar(c)) => Ok(self.clip_max(a, c)),
            (ElementwiseKind::Gelu, _) => Ok(self.gelu(a)),
            (ElementwiseKind::Scale | ElementwiseKind::ClipMax, Operand::Tensor(b)) => {
                Err(TensorError::ShapeMismatch {
                    op: "elementwise",
                    lhs: self.shape(a).to_vec(),
                    rhs: self.shape(b).to_vec(),
                })
            }
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
            Binary::Min => f64::min,
            Binary::Max => f64::max,
        };
        let data: Vec<f64> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            va.data().iter().map(|&x| f(x, y)).collect()
        } else {
            return Err(self.mismatch("elementwise", a, b));
        };
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `min(x, c)`; the gradient is zero at and above `c`.
    pub fn clip_max(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::ClipMax(a, c), |x| x.min(c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Unary(Unary::Relu, a), |x| x.max(0.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Unary(Unary::Gelu, a), gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Unary(Unary::Sigmoid, a), sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Unary(Unary::Abs, a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|_| self.mismatch("matmul", a, b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = va.dims2("transpose")?;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = va.data()[r * n + c];
            }
        }
        let value = Tensor::new(&[n, m], data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Affine map `x · w + b` for `x: [m, k]`, `w: [k, p]`, `b: [p]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (m, k) = vx.dims2("linear")?;
        let (k2, p) = vw.dims2("linear")?;
        if k != k2 {
            return Err(self.mismatch("linear", x, w));
        }
        if vb.numel() != p {
            return Err(self.mismatch("linear", w, b));
        }
        let mut data = Vec::with_capacity(m * p);
        for _ in 0..m {
            data.extend_from_slice(vb.data());
        }
        matmul_into(
            vx.data(),
            Transpose::No,
            vw.data(),
            Transpose::No,
            &mut data,
            m,
            k,
            p,
            true,
        );
        let value = Tensor::new(&[m, p], data)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    // ---- normalization ---------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, n, inner) = axis_split(vx.shape(), axis)?;
        let src = vx.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[at(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(vx.shape(), data)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, n, inner) = axis_split(vx.shape(), axis)?;
        let src = vx.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    data[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let value = Tensor::new(vx.shape(), data)?;
        Ok(self.push(value, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes each row over the last dimension, then applies `gain` and
    /// `bias`. A row whose entries are all equal normalizes to exactly zero.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *vx.shape().last().expect("rank >= 1");
        if vg.numel() != d {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if vb.numel() != d {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let rows = vx.numel() / d;
        let mut normalized = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            let constant = row.iter().all(|&v| v == row[0]);
            for c in 0..d {
                let xh = if constant { 0.0 } else { (row[c] - mean) * inv };
                normalized[r * d + c] = xh;
                data[r * d + c] = xh * vg.data()[c] + vb.data()[c];
            }
        }
        let value = Tensor::new(vx.shape(), data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    // ---- structural ------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::ShapeMismatch {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis { axis, rank: base.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(self.mismatch("concat", first, p));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis)?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let vp = self.value(p);
                let chunk = vp.shape()[axis] * inner;
                data.extend_from_slice(&vp.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Positions `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, n, inner) = axis_split(vx.shape(), axis)?;
        if len == 0 || start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                extent: n,
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * n * inner + start * inner;
            data.extend_from_slice(&vx.data()[from..from + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Stacks `times` copies of `x` along axis 0.
    pub fn tile(&mut self, x: Var, times: usize) -> Result<Var> {
        let vx = self.value(x);
        let mut shape = vx.shape().to_vec();
        shape[0] *= times;
        let data = vx.data().repeat(times);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Tile { x, times }, &[x]))
    }

    /// Sum or mean over one axis (removed from the shape) or over everything
    /// (`axis = None`, result shape `[1]`).
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let vx = self.value(x);
        let value = match axis {
            None => {
                let s = vx.data().iter().sum::<f64>();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / vx.numel() as f64,
                };
                Tensor::scalar(v)
            }
            Some(axis) => {
                let (outer, n, inner) = axis_split(vx.shape(), axis)?;
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            data[o * inner + i] += vx.data()[o * n * inner + j * inner + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    data.iter_mut().for_each(|v| *v /= n as f64);
                }
                let mut shape = vx.shape().to_vec();
                shape.remove(axis);
                if shape.is_empty() {
                    shape.push(1);
                }
                Tensor::new(&shape, data)?
            }
        };
        Ok(self.push(value, Op::Reduce { x, kind, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::Sum, None)
            .expect("full reduction is infallible")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::Mean, None)
            .expect("full reduction is infallible")
    }

    /// `out[i] = x[i, indices[i]]` for `x: [m, c]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (m, c) = vx.dims2("pick")?;
        if indices.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: vx.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let mut data = Vec::with_capacity(m);
        for (r, &j) in indices.iter().enumerate() {
            if j >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    extent: c,
                });
            }
            data.push(vx.data()[r * c + j]);
        }
        let value = Tensor::new(&[m], data)?;
        Ok(self.push(
            value,
            Op::Pick {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// Single-head scaled dot-product attention `softmax(q·kᵀ·scale)·v` for
    /// `q, k, v: [S, dh]`.
    ///
    /// Key positions `>= canonical_from` form an unordered set: their
    /// contributions to the softmax normalizer and to the weighted value sum
    /// are added in value order, so permuting those key rows (and the matching
    /// query rows) permutes the output rows bit-exactly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64, canonical_from: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (s, dh) = vq.dims2("attention")?;
        if vk.shape() != vq.shape() {
            return Err(self.mismatch("attention", q, k));
        }
        if vv.shape() != vq.shape() {
            return Err(self.mismatch("attention", q, v));
        }
        let split = canonical_from.min(s);
        let mut scores = vec![0.0; s * s];
        matmul_into(
            vq.data(),
            Transpose::No,
            vk.data(),
            Transpose::Yes,
            &mut scores,
            s,
            dh,
            s,
            false,
        );
        let mut probs = vec![0.0; s * s];
        let mut tail = Vec::with_capacity(s - split);
        for i in 0..s {
            let row = &scores[i * s..(i + 1) * s];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
            let p = &mut probs[i * s..(i + 1) * s];
            for j in 0..s {
                p[j] = (row[j] * scale - max).exp();
            }
            let head: f64 = p[..split].iter().sum();
            tail.clear();
            tail.extend_from_slice(&p[split..]);
            let z = canonical_sum(head, &mut tail);
            p.iter_mut().for_each(|x| *x /= z);
        }
        let mut out = vec![0.0; s * dh];
        let vvd = vv.data();
        if split == s {
            matmul_into(&probs, Transpose::No, vvd, Transpose::No, &mut out, s, s, dh, false);
        } else {
            if split > 0 {
                let mut p_head = Vec::with_capacity(s * split);
                for i in 0..s {
                    p_head.extend_from_slice(&probs[i * s..i * s + split]);
                }
                matmul_into(
                    &p_head,
                    Transpose::No,
                    &vvd[..split * dh],
                    Transpose::No,
                    &mut out,
                    s,
                    split,
                    dh,
                    false,
                );
            }
            for i in 0..s {
                for c in 0..dh {
                    tail.clear();
                    tail.extend((split..s).map(|j| probs[i * s + j] * vvd[j * dh + c]));
                    out[i * dh + c] = canonical_sum(out[i * dh + c], &mut tail);
                }
            }
        }
        let value = Tensor::new(&[s, dh], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, scale, probs }, &[q, k, v]))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// leaf that requires grad (zeros for leaves the loss does not reach);
    /// calling it again without [`Graph::zero_grad`] adds to them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::DisconnectedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((idx, g));
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for (idx, g) in leaf_grads {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (xa, xb) = (val(*a).data(), val(*b).data());
                let broadcast = xb.len() != xa.len();
                let y = |i: usize| if broadcast { xb[0] } else { xb[i] };
                // ties in min/max route the gradient to the first operand
                let partials = |i: usize| -> (f64, f64) {
                    match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (y(i), xa[i]),
                        Binary::Div => (1.0 / y(i), -xa[i] / (y(i) * y(i))),
                        Binary::Min if xa[i] <= y(i) => (1.0, 0.0),
                        Binary::Max if xa[i] >= y(i) => (1.0, 0.0),
                        Binary::Min | Binary::Max => (0.0, 1.0),
                    }
                };
                acc(*a, &mut |s| {
                    s.iter_mut().enumerate().for_each(|(i, s)| *s += g[i] * partials(i).0)
                });
                acc(*b, &mut |s| {
                    if broadcast {
                        s[0] += (0..g.len()).map(|i| g[i] * partials(i).1).sum::<f64>();
                    } else {
                        s.iter_mut().enumerate().for_each(|(i, s)| *s += g[i] * partials(i).1);
                    }
                });
            }
            Op::AddScalar(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)),
            Op::ClipMax(a, c) => {
                let x = val(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if x[i] < *c {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Unary(kind, a) => {
                let x = val(*a).data();
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => gelu_grad(x[i]),
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        s[i] += g[i] * d;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let p = vb.shape()[1];
                acc(*a, &mut |s| {
                    matmul_into(g, Transpose::No, vb.data(), Transpose::Yes, s, m, p, k, true)
                });
                acc(*b, &mut |s| {
                    matmul_into(va.data(), Transpose::Yes, g, Transpose::No, s, k, m, p, true)
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                acc(*a, &mut |s| {
                    for r in 0..m {
                        for c in 0..n {
                            s[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (m, k) = (vx.shape()[0], vx.shape()[1]);
                let p = vw.shape()[1];
                acc(*x, &mut |s| {
                    matmul_into(g, Transpose::No, vw.data(), Transpose::Yes, s, m, p, k, true)
                });
                acc(*w, &mut |s| {
                    matmul_into(vx.data(), Transpose::Yes, g, Transpose::No, s, k, m, p, true)
                });
                acc(*b, &mut |s| {
                    for r in 0..m {
                        for c in 0..p {
                            s[c] += g[r * p + c];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis).expect("validated");
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis).expect("validated");
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let total: f64 = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let rows = node.value.numel() / d;
                let gv = val(*gain).data();
                acc(*gain, &mut |s| {
                    for r in 0..rows {
                        for c in 0..d {
                            s[c] += g[r * d + c] * normalized[r * d + c];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for r in 0..rows {
                        for c in 0..d {
                            s[c] += g[r * d + c];
                        }
                    }
                });
                {
                    acc(*x, &mut |s| {
                        let mut dxh = vec![0.0; d];
                        for r in 0..rows {
                            let mut sum = 0.0;
                            let mut dot = 0.0;
                            for c in 0..d {
                                dxh[c] = g[r * d + c] * gv[c];
                                sum += dxh[c];
                                dot += dxh[c] * normalized[r * d + c];
                            }
                            let k = inv_std[r] / d as f64;
                            for c in 0..d {
                                s[r * d + c] += k * (d as f64 * dxh[c] - sum - normalized[r * d + c] * dot);
                            }
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis).expect("validated");
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).shape()[*axis];
                    acc(p, &mut |s| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * n * inner;
                            for t in 0..n * inner {
                                s[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(val(*x).shape(), *axis).expect("validated");
                let len = node.value.shape()[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            s[dst + t] += g[src + t];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Tile { x, times } => {
                let n = val(*x).numel();
                acc(*x, &mut |s| {
                    for t in 0..*times {
                        for i in 0..n {
                            s[i] += g[t * n + i];
                        }
                    }
                });
            }
            Op::Reduce { x, kind, axis } => {
                let vx = val(*x);
                match axis {
                    None => {
                        let f = match kind {
                            ReduceKind::Sum => g[0],
                            ReduceKind::Mean => g[0] / vx.numel() as f64,
                        };
                        acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += f));
                    }
                    Some(axis) => {
                        let (outer, n, inner) = axis_split(vx.shape(), *axis).expect("validated");
                        let f = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / n as f64,
                        };
                        acc(*x, &mut |s| {
                            for o in 0..outer {
                                for j in 0..n {
                                    for i in 0..inner {
                                        s[o * n * inner + j * inner + i] += f * g[o * inner + i];
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::Pick { x, indices } => {
                let c = val(*x).shape()[1];
                acc(*x, &mut |s| {
                    for (r, &j) in indices.iter().enumerate() {
                        s[r * c + j] += g[r];
                    }
                });
            }
            Op::Attention { q, k, v, scale, probs } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let (s_len, dh) = (vq.shape()[0], vq.shape()[1]);
                // dP = dOut · Vᵀ
                let mut dp = vec![0.0; s_len * s_len];
                matmul_into(
                    g,
                    Transpose::No,
                    vv.data(),
                    Transpose::Yes,
                    &mut dp,
                    s_len,
                    dh,
                    s_len,
                    false,
                );
                acc(*v, &mut |sv| {
                    matmul_into(probs, Transpose::Yes, g, Transpose::No, sv, s_len, s_len, dh, true)
                });
                // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the score scale
                for i in 0..s_len {
                    let row = i * s_len..(i + 1) * s_len;
                    let dot: f64 = probs[row.clone()]
                        .iter()
                        .zip(&dp[row.clone()])
                        .map(|(p, d)| p * d)
                        .sum();
                    for j in row {
                        dp[j] = probs[j] * (dp[j] - dot) * scale;
                    }
                }
                acc(*q, &mut |sq| {
                    matmul_into(&dp, Transpose::No, vk.data(), Transpose::No, sq, s_len, s_len, dh, true)
                });
                acc(*k, &mut |sk| {
                    matmul_into(
                        &dp,
                        Transpose::Yes,
                        vq.data(),
                        Transpose::No,
                        sk,
                        s_len,
                        s_len,
                        dh,
                        true,
                    )
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.elementwise(ElementwiseKind::Add, a, Operand::Tensor(b)).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let x = g.constant(t(&[2], &[0.5, 12.0]));
        let c = g
            .elementwise(ElementwiseKind::ClipMax, x, Operand::Scalar(10.0))
            .unwrap();
        assert_eq!(g.value(c).data(), &[0.5, 10.0]);
        let y = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.mul(a, y), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn clip_max_has_zero_gradient_at_and_above_threshold() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[9.0, 10.0, 11.0]), true);
        let c = g.clip_max(x, 10.0);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        let d = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.matmul(a, d), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);
        let y = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let p = g.softmax(y, 0).unwrap();
        assert!((g.value(p).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(p).data()[1] - 0.75).abs() < 1e-15);
        let z = g.constant(t(&[3], &[0.3, -1.2, 2.0]));
        let z_shift = g.add_scalar(z, 7.5);
        let a = g.softmax(z, 0).unwrap();
        let b = g.softmax(z_shift, 0).unwrap();
        for (u, v) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((u - v).abs() < 1e-15);
        }
        assert!(matches!(g.softmax(z, 1), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let zeros = g.constant(Tensor::zeros(&[3]));
        let bias = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let flat = g.constant(Tensor::full(&[2, 3], 0.1));
        let y = g.layer_norm(flat, ones, zeros, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let yb = g.layer_norm(flat, ones, bias, 1e-5).unwrap();
        assert_eq!(&g.value(yb).data()[..3], &[0.5, -1.0, 2.0]);

        let gain2 = g.constant(Tensor::full(&[2], 1.0));
        let bias2 = g.constant(Tensor::zeros(&[2]));
        let row = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(row, gain2, bias2, 1e-14).unwrap();
        for (u, v) in g.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((u - v).abs() < 1e-12);
        }
        let wrong = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.layer_norm(wrong, gain2, bias2, 1e-5).is_err());
    }

    #[test]
    fn concat_examples() {
        let d = 3;
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, d]));
        let b = g.constant(Tensor::zeros(&[64, d]));
        let c = g.constant(Tensor::zeros(&[5, d]));
        let out = g.concat(&[a, b, c], 0).unwrap();
        assert_eq!(g.shape(out), &[70, d]);
        let single = g.concat(&[b], 0).unwrap();
        assert_eq!(g.value(single), g.value(b));
        let bad = g.constant(Tensor::zeros(&[2, d + 1]));
        assert!(matches!(g.concat(&[a, bad], 0), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[2.0, 4.0]));
        let m = g.mean(x);
        assert_eq!(g.value(m).data(), &[3.0]);
        let z = g.constant(Tensor::zeros(&[5]));
        let s = g.sum(z);
        assert_eq!(g.value(s).data(), &[0.0]);
        let m2 = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let col = g.reduce(m2, ReduceKind::Mean, Some(0)).unwrap();
        assert_eq!(g.value(col).data(), &[2.0, 3.0]);
        assert!(matches!(
            g.reduce(m2, ReduceKind::Sum, Some(2)),
            Err(TensorError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[3], &[0.1, 0.2, 0.3]), true);
        let x = g.constant(t(&[3], &[1.0, -2.0, 5.0]));
        let wx = g.mul(w, x).unwrap();
        let loss = g.sum(wx);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, -2.0, 5.0]);

        // repeated calls accumulate
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, -4.0, 10.0]);

        let mut g = Graph::new();
        let w = g.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]), true);
        let unused = g.leaf(t(&[2], &[1.0, 1.0]), true);
        let sq = g.square(w).unwrap();
        let loss = g.mean(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[0.5, -1.0, 1.5, 0.25]);
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(w), Err(TensorError::NotScalar(_))));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(TensorError::DisconnectedLoss)));
    }

    #[test]
    fn frozen_leaf_never_accumulates() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let frozen = g.leaf(t(&[2], &[3.0, 4.0]), false);
        let p = g.mul(w, frozen).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert!(g.grad(frozen).is_none());
    }

    #[test]
    fn attention_single_token_is_value() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 2], &[0.3, -0.7]));
        let k = g.constant(t(&[1, 2], &[1.5, 0.2]));
        let v = g.constant(t(&[1, 2], &[4.0, -2.0]));
        let out = g.attention(q, k, v, 0.5, 1).unwrap();
        assert_eq!(g.value(out).data(), &[4.0, -2.0]);
    }

    #[test]
    fn attention_canonical_tail_is_permutation_exact() {
        let s = 7;
        let dh = 3;
        let rows: Vec<Vec<f64>> = (0..s)
            .map(|i| (0..3 * dh).map(|j| ((i * 31 + j * 7) as f64 * 0.173).sin()).collect())
            .collect();
        let run = |order: &[usize]| {
            let mut g = Graph::new();
            let pick = |off: usize| {
                let data: Vec<f64> = order.iter().flat_map(|&i| rows[i][off..off + dh].to_vec()).collect();
                Tensor::new(&[s, dh], data).unwrap()
            };
            let q = g.constant(pick(0));
            let k = g.constant(pick(dh));
            let v = g.constant(pick(2 * dh));
            let out = g.attention(q, k, v, 0.6, 4).unwrap();
            g.value(out).clone()
        };
        let base = run(&[0, 1, 2, 3, 4, 5, 6]);
        let swapped = run(&[0, 1, 2, 3, 6, 5, 4]);
        for c in 0..dh {
            assert_eq!(base.data()[4 * dh + c].to_bits(), swapped.data()[6 * dh + c].to_bits());
            assert_eq!(base.data()[6 * dh + c].to_bits(), swapped.data()[4 * dh + c].to_bits());
            for r in 0..4 {
                assert_eq!(base.data()[r * dh + c].to_bits(), swapped.data()[r * dh + c].to_bits());
            }
        }
    }
}
