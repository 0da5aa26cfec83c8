//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Graph`] (a Wengert list) holding the
//! computed value and enough of the inputs to replay the chain rule backwards.
//! Node handles are plain indices ([`Var`]); the graph owns all values.
//!
//! Every forward result is checked for finiteness, so a NaN or infinity is
//! reported at the operation that produced it instead of surfacing later.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Ln,
    Abs,
    Act(Activation),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reduce {
        x: Var,
        axis: usize,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Affine { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Gather { x: Var, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Build values with the operation methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

/// Flat offsets into an input of shape `input` for every element of the
/// broadcast output `out` (same rank; input extents are equal or 1).
fn broadcast_offsets(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if input[d] == 1 { 0 } else { acc };
        acc *= input[d];
    }
    let n: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, shape_str(a), shape_str(b)));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(op, shape_str(a), shape_str(b))),
        })
        .collect()
}

/// `(outer, extent, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient is accumulated for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", "[m, k] x [k, n]", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", "rank 2", shape_str(s)));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x])
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Max => x.max(y),
            Binary::Min => x.min(y),
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let value = if sa == sb {
            Tensor::from_parts(sa, da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect())
        } else {
            let out = broadcast_shape(name, &sa, &sb)?;
            let oa = broadcast_offsets(&out, &sa);
            let ob = broadcast_offsets(&out, &sb);
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::from_parts(out, data)
        };
        self.push(name, value, Op::Binary(kind, a, b), &[a, b])
    }

    /// Elementwise sum with broadcasting over extent-1 axes (equal rank).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, "maximum", a, b)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, "minimum", a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    fn unary(&mut self, kind: Unary, name: &'static str, x: Var) -> Result<Var> {
        let value = match kind {
            Unary::Exp => self.value(x).map(f64::exp),
            Unary::Ln => self.value(x).map(f64::ln),
            Unary::Abs => self.value(x).map(f64::abs),
            Unary::Act(Activation::Relu) => self.value(x).map(|v| v.max(0.0)),
            Unary::Act(Activation::Gelu) => self.value(x).map(gelu),
            Unary::Act(Activation::Sigmoid) => self.value(x).map(sigmoid),
        };
        self.push(name, value, Op::Unary(kind, x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, "exp", x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Ln, "ln", x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, "abs", x)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let name = match kind {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        };
        self.unary(Unary::Act(kind), name, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis < {}", shape.len()), axis));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (d[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensors have rank >= 1");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias [{d}]"),
                format!("{:?}/{:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d;
        let mut normed = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                normed[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            rstd,
        };
        self.push("layer_norm", Tensor::from_parts(shape, out), op, &[x, gain, bias])
    }

    /// Mean or max along `axis`, keeping it as an extent-1 axis. Max routes
    /// its gradient to the first arg-max.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: ReduceKind) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("reduce", format!("axis < {}", shape.len()), axis));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                match kind {
                    ReduceKind::Mean => {
                        out[o * inner + i] = (0..n).map(|k| d[at(k)]).sum::<f64>() / n as f64;
                    }
                    ReduceKind::Max => {
                        let mut best = 0;
                        for k in 1..n {
                            if d[at(k)] > d[at(best)] {
                                best = k;
                            }
                        }
                        out[o * inner + i] = d[at(best)];
                        argmax[o * inner + i] = at(best);
                    }
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let op = Op::Reduce {
            x,
            axis,
            kind,
            argmax,
        };
        self.push("reduce", Tensor::from_parts(oshape, out), op, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, ReduceKind::Mean)
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, ReduceKind::Max)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `x·W + b` over the trailing axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fin = *sx.last().expect("rank >= 1");
        if sw.len() != 2 || sw[0] != fin {
            return Err(Error::shape("affine", format!("weight [{fin}, _]"), shape_str(&sw)));
        }
        let fout = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("affine", format!("bias [{fout}]"), shape_str(self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / fin;
        let mut out = vec![0.0; rows * fout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * fout..(r + 1) * fout].copy_from_slice(bd);
            }
        }
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, fin, fout);
        let mut oshape = sx;
        *oshape.last_mut().unwrap() = fout;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("affine", Tensor::from_parts(oshape, out), Op::Affine { x, w, b }, &inputs)
    }

    /// Length-preserving 1-D cross-correlation with zero padding `(k−1)/2`.
    /// `x: [C_in, L]`, `w: [C_out, C_in, k]`, `b: [C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(Error::shape(
                "conv1d",
                "x [C_in, L], w [C_out, C_in, k]",
                format!("{sx:?}, {sw:?}"),
            ));
        }
        let (cin, len) = (sx[0], sx[1]);
        let (cout, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(Error::config(format!("conv1d kernel size must be odd, got {k}")));
        }
        let pad = (k - 1) / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; cout * len];
        for o in 0..cout {
            let bias = b.map_or(0.0, |b| self.value(b).data()[o]);
            for t in 0..len {
                let mut acc = bias;
                for c in 0..cin {
                    for j in 0..k {
                        let src = t + j;
                        if src < pad || src - pad >= len {
                            continue;
                        }
                        acc += wd[(o * cin + c) * k + j] * xd[c * len + src - pad];
                    }
                }
                out[o * len + t] = acc;
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv1d", Tensor::from_parts(vec![cout, len], out), Op::Conv1d { x, w, b }, &inputs)
    }

    /// Size-preserving 2-D cross-correlation with zero padding `(k−1)/2`.
    /// `x: [C_in, H, W]`, `w: [C_out, C_in, k, k]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::shape(
                "conv2d",
                "x [C_in, H, W], w [C_out, C_in, k, k]",
                format!("{sx:?}, {sw:?}"),
            ));
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(Error::config(format!("conv2d kernel size must be odd, got {k}")));
        }
        let (cin, h, wd_) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        let pad = (k - 1) / 2;
        let xd = self.value(x).data();
        let wt = self.value(w).data();
        let plane = h * wd_;
        let mut out = vec![0.0; cout * plane];
        for o in 0..cout {
            let dst = &mut out[o * plane..(o + 1) * plane];
            if let Some(b) = b {
                dst.fill(self.value(b).data()[o]);
            }
            for c in 0..cin {
                let src = &xd[c * plane..(c + 1) * plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((o * cin + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            let srow = &src[(sy - pad) * wd_..(sy - pad + 1) * wd_];
                            let drow = &mut dst[y * wd_..(y + 1) * wd_];
                            for xo in 0..wd_ {
                                let sxp = xo + kx;
                                if sxp < pad || sxp - pad >= wd_ {
                                    continue;
                                }
                                drow[xo] += wv * srow[sxp - pad];
                            }
                        }
                    }
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv2d", Tensor::from_parts(vec![cout, h, wd_], out), Op::Conv2d { x, w, b }, &inputs)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::config("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis < {}", first.len()), axis));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", shape_str(&first), shape_str(s)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push("concat", Tensor::from_parts(oshape, out), op, parts)
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range within {shape:?} on axis {axis}"),
                format!("{start}..{}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push("slice", Tensor::from_parts(oshape, out), Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let d = self.value(x).data();
        if indices.is_empty() || indices.iter().any(|&i| i >= d.len()) {
            return Err(Error::shape("gather", format!("indices < {}", d.len()), format!("{indices:?}")));
        }
        let value = Tensor::from_vec(indices.iter().map(|&i| d[i]).collect());
        let op = Op::Gather {
            x,
            indices: indices.to_vec(),
        };
        self.push("gather", value, op, &[x])
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "one-element loss", shape_str(self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(gd, self.value(b).data(), &mut da, m, n, k);
                    self.accumulate(grads, a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(self.value(a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, b, Tensor::from_parts(vec![k, n], db));
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = gd[j * r + i];
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![r, c], dx));
            }
            &Op::Binary(kind, a, b) => self.binary_backward(kind, a, b, node, g, grads),
            &Op::Scale(x, c) => self.accumulate(grads, x, g.map(|v| v * c)),
            &Op::AddScalar(x) => self.accumulate(grads, x, g.clone()),
            &Op::Unary(kind, x) => {
                let xd = self.value(x).data();
                let yd = node.value.data();
                let dx: Vec<f64> = (0..gd.len())
                    .map(|j| {
                        let local = match kind {
                            Unary::Exp => yd[j],
                            Unary::Ln => 1.0 / xd[j],
                            Unary::Abs => {
                                if xd[j] > 0.0 {
                                    1.0
                                } else if xd[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Act(Activation::Relu) => {
                                if xd[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Act(Activation::Gelu) => gelu_grad(xd[j]),
                            Unary::Act(Activation::Sigmoid) => yd[j] * (1.0 - yd[j]),
                        };
                        gd[j] * local
                    })
                    .collect();
                self.accumulate(grads, x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            &Op::Clamp { x, lo, hi } => {
                let xd = self.value(x).data();
                let dx = (0..gd.len())
                    .map(|j| if xd[j] < lo || xd[j] > hi { 0.0 } else { gd[j] })
                    .collect();
                self.accumulate(grads, x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            &Op::Softmax { x, axis } => {
                let shape = g.shape();
                let (outer, n, inner) = split_axis(shape, axis);
                let y = node.value.data();
                let mut dx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + ii;
                        let dot: f64 = (0..n).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(shape.to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let rows = gd.len() / d;
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * normed[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::from_vec(dg));
                    self.accumulate(grads, *bias, Tensor::from_vec(db));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * normed[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - normed[r * d + j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), dx));
                }
            }
            Op::Reduce {
                x,
                axis,
                kind,
                argmax,
            } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let mut dx = vec![0.0; outer * n * inner];
                match kind {
                    ReduceKind::Mean => {
                        for o in 0..outer {
                            for ii in 0..inner {
                                let gv = gd[o * inner + ii] / n as f64;
                                for k in 0..n {
                                    dx[(o * n + k) * inner + ii] = gv;
                                }
                            }
                        }
                    }
                    ReduceKind::Max => {
                        for (j, &src) in argmax.iter().enumerate() {
                            dx[src] += gd[j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
            }
            &Op::Sum(x) => {
                let shape = self.shape(x).to_vec();
                self.accumulate(grads, x, Tensor::full(shape, gd[0]));
            }
            &Op::Affine { x, w, b } => {
                let sx = self.shape(x).to_vec();
                let (fin, fout) = (self.shape(w)[0], self.shape(w)[1]);
                let rows = gd.len() / fout;
                if self.wants(x) {
                    let mut dx = vec![0.0; rows * fin];
                    gemm_nt_acc(gd, self.value(w).data(), &mut dx, rows, fout, fin);
                    self.accumulate(grads, x, Tensor::from_parts(sx, dx));
                }
                if self.wants(w) {
                    let mut dw = vec![0.0; fin * fout];
                    gemm_tn_acc(self.value(x).data(), gd, &mut dw, rows, fin, fout);
                    self.accumulate(grads, w, Tensor::from_parts(vec![fin, fout], dw));
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut db = vec![0.0; fout];
                    for r in 0..rows {
                        for (acc, v) in db.iter_mut().zip(&gd[r * fout..(r + 1) * fout]) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_vec(db));
                }
            }
            &Op::Conv1d { x, w, b } => {
                let (cin, len) = (self.shape(x)[0], self.shape(x)[1]);
                let (cout, k) = (self.shape(w)[0], self.shape(w)[2]);
                let pad = (k - 1) / 2;
                let xd = self.value(x).data();
                let wd = self.value(w).data();
                let mut dx = vec![0.0; cin * len];
                let mut dw = vec![0.0; cout * cin * k];
                for o in 0..cout {
                    for t in 0..len {
                        let go = gd[o * len + t];
                        for c in 0..cin {
                            for j in 0..k {
                                let src = t + j;
                                if src < pad || src - pad >= len {
                                    continue;
                                }
                                let xi = c * len + src - pad;
                                let wi = (o * cin + c) * k + j;
                                dx[xi] += go * wd[wi];
                                dw[wi] += go * xd[xi];
                            }
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![cin, len], dx));
                self.accumulate(grads, w, Tensor::from_parts(vec![cout, cin, k], dw));
                if let Some(b) = b {
                    let db = (0..cout).map(|o| gd[o * len..(o + 1) * len].iter().sum()).collect();
                    self.accumulate(grads, b, Tensor::from_vec(db));
                }
            }
            &Op::Conv2d { x, w, b } => self.conv2d_backward(x, w, b, g, grads),
            Op::Concat { parts, axis } => {
                let oshape = g.shape();
                let (outer, total, inner) = split_axis(oshape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(self.shape(p).to_vec(), dp));
                    }
                    offset += n;
                }
            }
            &Op::Slice { x, axis, start } => {
                let shape = self.shape(x).to_vec();
                let (outer, n, inner) = split_axis(&shape, axis);
                let len = g.shape()[axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, x, Tensor::from_parts(shape, dx));
            }
            &Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                self.accumulate(grads, x, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::Gather { x, indices } => {
                let shape = self.shape(*x).to_vec();
                let mut dx = Tensor::zeros(shape);
                for (j, &src) in indices.iter().enumerate() {
                    dx.data_mut()[src] += gd[j];
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }

    fn binary_backward(
        &self,
        kind: Binary,
        a: Var,
        b: Var,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let out = g.shape();
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (oa, ob) = if sa == out && sb == out {
            let id: Vec<usize> = (0..g.numel()).collect();
            (id.clone(), id)
        } else {
            (broadcast_offsets(out, &sa), broadcast_offsets(out, &sb))
        };
        let yd = node.value.data();
        let gd = g.data();
        let mut da = vec![0.0; ad.len()];
        let mut db = vec![0.0; bd.len()];
        for j in 0..gd.len() {
            let (x, y) = (ad[oa[j]], bd[ob[j]]);
            let (ga, gb) = match kind {
                Binary::Add => (1.0, 1.0),
                Binary::Sub => (1.0, -1.0),
                Binary::Mul => (y, x),
                Binary::Div => (1.0 / y, -yd[j] / y),
                Binary::Max => {
                    if x >= y {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                }
                Binary::Min => {
                    if x <= y {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                }
            };
            da[oa[j]] += gd[j] * ga;
            db[ob[j]] += gd[j] * gb;
        }
        self.accumulate(grads, a, Tensor::from_parts(sa, da));
        self.accumulate(grads, b, Tensor::from_parts(sb, db));
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Option<Var>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (cin, h, wd_) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let pad = (k - 1) / 2;
        let plane = h * wd_;
        let xd = self.value(x).data();
        let wt = self.value(w).data();
        let gd = g.data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dx = vec![0.0; if want_x { cin * plane } else { 0 }];
        let mut dw = vec![0.0; if want_w { wt.len() } else { 0 }];
        for o in 0..cout {
            let go = &gd[o * plane..(o + 1) * plane];
            for c in 0..cin {
                let src = &xd[c * plane..(c + 1) * plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((o * cin + c) * k + ky) * k + kx;
                        let wv = wt[wi];
                        let mut acc = 0.0;
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            let row = (sy - pad) * wd_;
                            for xo in 0..wd_ {
                                let sxp = xo + kx;
                                if sxp < pad || sxp - pad >= wd_ {
                                    continue;
                                }
                                let gv = go[y * wd_ + xo];
                                acc += gv * src[row + sxp - pad];
                                if want_x {
                                    dx[c * plane + row + sxp - pad] += gv * wv;
                                }
                            }
                        }
                        if want_w {
                            dw[wi] += acc;
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::from_parts(sx, dx));
        }
        if want_w {
            self.accumulate(grads, w, Tensor::from_parts(sw, dw));
        }
        if let Some(b) = b {
            let db = (0..cout).map(|o| gd[o * plane..(o + 1) * plane].iter().sum()).collect();
            self.accumulate(grads, b, Tensor::from_vec(db));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Weighted sum so every output element gets a distinct upstream gradient.
    fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut r);
        let w = g.input(w);
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng());
        let i3 = g.input(Tensor::eye(3));
        let av = g.input(a.clone());
        let y = g.matmul(i3, av).unwrap();
        assert_eq!(g.value(y), &a);

        let x = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = g.input(t(&[2, 1], &[1.0, 1.0]));
        let y = g.matmul(x, ones).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);

        let bad = g.matmul(x, i3);
        assert!(matches!(bad, Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng();
        let a = Tensor::randn(vec![5, 7], 1.0, &mut r);
        let b = Tensor::randn(vec![7, 3], 1.0, &mut r);
        let rep = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                probe(g, y, 1)
            },
            &[a, b],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(vec![5]));
        let y = g.softmax(z, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let x = g.input(Tensor::from_vec(vec![0.0, 2f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12 && (d[1] - 2.0 / 3.0).abs() < 1e-12);

        let huge = g.input(Tensor::from_vec(vec![1000.0, 1000.0]));
        let y = g.softmax(huge, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        assert!(g.softmax(huge, 1).is_err());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng());
        for axis in 0..2 {
            let rep = grad_check(
                |g, v| {
                    let y = g.softmax(v[0], axis)?;
                    probe(g, y, 2)
                },
                std::slice::from_ref(&x),
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(rep.max_rel_err < 1e-6, "axis {axis}: {rep:?}");
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.input(Tensor::ones(vec![2]));
        let bias = g.input(Tensor::zeros(vec![2]));
        let c = g.input(t(&[1, 2], &[4.0, 4.0]));
        let y = g.layer_norm(c, gain, bias, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.input(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        let d = g.value(y).data();
        // var = 1, so the eps correction is 1/sqrt(1 + 1e-6)
        assert!((d[0] + 1.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut r = rng();
        let x = Tensor::randn(vec![3, 5], 1.0, &mut r);
        let gain = Tensor::randn(vec![5], 1.0, &mut r);
        let bias = Tensor::randn(vec![5], 1.0, &mut r);
        let rep = grad_check(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
                probe(g, y, 3)
            },
            &[x, gain, bias],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let c = g.input(Tensor::full(vec![3, 4], 2.5));
        let m = g.mean_axis(c, 1).unwrap();
        assert_eq!(g.value(m).data(), &[2.5, 2.5, 2.5]);

        let x = g.param(Tensor::from_vec(vec![1.0, 5.0, 3.0]));
        let m = g.max_axis(x, 0).unwrap();
        assert_eq!(g.value(m).data(), &[5.0]);
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);

        let big = g.input(Tensor::randn(vec![320, 768], 1.0, &mut rng()));
        for kind in [ReduceKind::Mean, ReduceKind::Max] {
            let a = g.reduce(big, 1, kind).unwrap();
            let b = g.reduce(big, 0, kind).unwrap();
            assert_eq!(g.shape(a), &[320, 1]);
            assert_eq!(g.shape(b), &[1, 768]);
        }
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![2.0, 7.0, 7.0, 1.0]));
        let m = g.max_axis(x, 0).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn reduce_gradient_matches_finite_differences() {
        let x = Tensor::randn(vec![4, 5], 1.0, &mut rng());
        for kind in [ReduceKind::Mean, ReduceKind::Max] {
            for axis in 0..2 {
                let rep = grad_check(
                    |g, v| {
                        let y = g.reduce(v[0], axis, kind)?;
                        probe(g, y, 4)
                    },
                    std::slice::from_ref(&x),
                    &GradCheckOptions::default(),
                )
                .unwrap();
                assert!(rep.max_rel_err < 1e-6, "{kind:?} axis {axis}: {rep:?}");
            }
        }
    }

    #[test]
    fn conv1d_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let id = g.input(t(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, id, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        let box3 = g.input(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
        let zero_b = g.input(Tensor::zeros(vec![1]));
        let y = g.conv1d(x, box3, Some(zero_b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);

        let even = g.input(Tensor::ones(vec![1, 1, 2]));
        assert!(matches!(g.conv1d(x, even, None), Err(Error::Config(_))));
    }

    #[test]
    fn conv1d_gradient_matches_finite_differences() {
        let mut r = rng();
        let x = Tensor::randn(vec![2, 16], 1.0, &mut r);
        let w = Tensor::randn(vec![1, 2, 7], 1.0, &mut r);
        let b = Tensor::randn(vec![1], 1.0, &mut r);
        let rep = grad_check(
            |g, v| {
                let y = g.conv1d(v[0], v[1], Some(v[2]))?;
                probe(g, y, 5)
            },
            &[x, w, b],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut r = rng();
        let x = Tensor::randn(vec![3, 4, 5], 1.0, &mut r);
        let w = Tensor::randn(vec![2, 3, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(vec![2], 1.0, &mut r);
        let rep = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]))?;
                probe(g, y, 6)
            },
            &[x, w, b],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn conv2d_one_by_one_is_channel_mixing() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(vec![2, 2, 2], |i| i as f64));
        let w = g.input(t(&[1, 2, 1, 1], &[1.0, 10.0]));
        let y = g.conv2d(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[40.0, 51.0, 62.0, 73.0]);
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = Tensor::randn(vec![4, 3], 1.0, &mut rng());
        let xv = g.input(x.clone());
        let id = g.input(Tensor::eye(3));
        let zb = g.input(Tensor::zeros(vec![3]));
        let y = g.affine(xv, id, Some(zb)).unwrap();
        assert_eq!(g.value(y), &x);

        let zw = g.input(Tensor::zeros(vec![3, 5]));
        let zb5 = g.input(Tensor::zeros(vec![5]));
        let y = g.affine(xv, zw, Some(zb5)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(y), &[4, 5]);

        let wrong = g.input(Tensor::zeros(vec![4, 5]));
        assert!(g.affine(xv, wrong, None).is_err());
    }

    #[test]
    fn affine_gradient_matches_finite_differences() {
        let mut r = rng();
        let x = Tensor::randn(vec![2, 3, 4], 1.0, &mut r);
        let w = Tensor::randn(vec![4, 5], 1.0, &mut r);
        let b = Tensor::randn(vec![5], 1.0, &mut r);
        let rep = grad_check(
            |g, v| {
                let y = g.affine(v[0], v[1], Some(v[2]))?;
                probe(g, y, 7)
            },
            &[x, w, b],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn activation_examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![-2.0, 3.0, 0.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 3.0, 0.0]);
        let ge = g.gelu(x).unwrap();
        assert_eq!(g.value(ge).data()[2], 0.0);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[2], 0.5);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut r = rng();
        let a = Tensor::randn(vec![3, 4], 1.0, &mut r);
        // keep the divisor and the log argument away from zero
        let b = Tensor::randn(vec![1, 4], 1.0, &mut r).map(|v| v.abs() + 0.5);
        let rep = grad_check(
            |g, v| {
                let ge = g.gelu(v[0])?;
                let s = g.sigmoid(v[0])?;
                let q = g.div(ge, v[1])?;
                let l = g.ln(v[1])?;
                let e = g.exp(s)?;
                let m = g.mul(e, l)?;
                let d = g.sub(q, m)?;
                let mx = g.maximum(d, v[1])?;
                let mn = g.minimum(mx, s)?;
                let ab = g.abs(d)?;
                let sum = g.add(mn, ab)?;
                probe(g, sum, 8)
            },
            &[a, b],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn structural_gradients_match_finite_differences() {
        let mut r = rng();
        let a = Tensor::randn(vec![2, 3], 1.0, &mut r);
        let b = Tensor::randn(vec![2, 2], 1.0, &mut r);
        let rep = grad_check(
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let s = g.slice(c, 1, 1, 3)?;
                let tr = g.transpose(s)?;
                let rs = g.reshape(tr, &[2, 3])?;
                let sc = g.scale(rs, -1.5)?;
                let sh = g.add_scalar(sc, 0.25)?;
                let gat = g.gather(sh, &[0, 4, 4])?;
                let row = g.concat(&[v[0], v[0]], 0)?;
                let p = probe(g, row, 9)?;
                let q = probe(g, gat, 10)?;
                g.add(p, q)
            },
            &[a, b],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn broadcast_binary_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let col = g.input(t(&[2, 1], &[10.0, 20.0]));
        let row = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = g.mul(a, col).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 10.0, 20.0, 60.0, 80.0, 100.0]);
        let y = g.add(a, row).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 5.0, 4.0, 6.0, 8.0]);
        let bad = g.input(Tensor::zeros(vec![3, 3]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn operations_are_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(Tensor::randn(vec![6, 8], 1.0, &mut rng()));
            let w = g.param(Tensor::randn(vec![8, 8], 1.0, &mut rng()));
            let y = g.affine(x, w, None).unwrap();
            let s = g.softmax(y, 1).unwrap();
            let l = probe(&mut g, s, 11).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).clone(), grads.get(w).unwrap().clone())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
        assert!(a.1.data().iter().zip(b.1.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            data in proptest::collection::vec(-50.0f64..50.0, 12),
            axis in 0usize..2,
        ) {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![3, 4], data).unwrap());
            let y = g.softmax(x, axis).unwrap();
            let s = g.reduce(y, axis, ReduceKind::Mean).unwrap();
            let n = g.shape(x)[axis] as f64;
            for v in g.value(s).data() {
                prop_assert!((v * n - 1.0).abs() < 1e-9);
            }
            prop_assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn zero_weights_give_exact_zero(data in proptest::collection::vec(-1e3f64..1e3, 16)) {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![2, 8], data).unwrap());
            let w = g.input(Tensor::zeros(vec![1, 2, 7]));
            let b = g.input(Tensor::zeros(vec![1]));
            let y = g.conv1d(x, w, Some(b)).unwrap();
            prop_assert!(g.value(y).data().iter().all(|&v| v == 0.0));
            let wa = g.input(Tensor::zeros(vec![8, 3]));
            let ba = g.input(Tensor::zeros(vec![3]));
            let y = g.affine(x, wa, Some(ba)).unwrap();
            prop_assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }
}
