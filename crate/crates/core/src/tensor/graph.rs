//! Define-by-run tape with reverse-mode accumulation.
//!
//! Every op appends one node whose parents are strictly earlier on the tape,
//! so reverse tape order is a valid topological order and each node is
//! visited once per backward pass.

use super::kernels::{
    broadcast_shape, broadcast_strides, col2im_add, for_each_broadcast, im2col, log_sigmoid,
    sigmoid, softmax_rows, ConvGeom,
};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Bmm(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Softmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumLastDim(Var),
    InstanceNorm(Var, T),
    Glu(Var),
    Upsample2(Var),
    AvgPool2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// A tape of recorded operations, confined to one thread.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite { op: name, index });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self
                .parents(&op)
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op<T>) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Bmm(a, b) => vec![a, b],
            Op::Concat { a, b, .. } => vec![a, b],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::LeakyRelu(x, _)
            | Op::LogSigmoid(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumLastDim(x)
            | Op::InstanceNorm(x, _)
            | Op::Glu(x)
            | Op::Upsample2(x)
            | Op::AvgPool2(x) => vec![x],
        }
    }

    /// Records a leaf. Gradients accumulate on it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "leaf")?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A constant copy of `x`: no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str) -> Result<Var> {
        let (sa_shape, sb_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa_shape, &sb_shape)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let f: fn(T, T) -> T = match op {
            Op::Add(..) => |x: T, y: T| x + y,
            Op::Sub(..) => |x: T, y: T| x - y,
            _ => |x: T, y: T| x * y,
        };
        let data = if sa_shape == sb_shape {
            xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let numel = out_shape.iter().product();
            let mut out = vec![T::zero(); numel];
            let sa = broadcast_strides(&sa_shape, &out_shape);
            let sb = broadcast_strides(&sb_shape, &out_shape);
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(xa[i], xb[j]));
            out
        };
        self.push(Tensor::new(out_shape, data)?, op, name)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub")
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * s).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::Scale(x, s), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e + s).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::AddScalar(x), "add_scalar")
    }

    /// Matrix product of `[m, k]` by `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let (m, n) = (sa[0], sb[1]);
        let a3 = self.reshape(a, vec![1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, vec![1, sb[0], sb[1]])?;
        let out = self.bmm(a3, b3)?;
        self.reshape(out, vec![m, n])
    }

    /// Batched product of `[B, m, k]` by `[B, k, n]`; a batch of 1 broadcasts.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[2] != sb[1] {
            return Err(Error::shape(format!(
                "bmm: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let (ba, bb) = (sa[0], sb[0]);
        if ba != bb && ba != 1 && bb != 1 {
            return Err(Error::shape(format!(
                "bmm: batch sizes {ba} and {bb} disagree"
            )));
        }
        let (batch, m, k, n) = (ba.max(bb), sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let ai = if ba == 1 { 0 } else { i };
            let bi = if bb == 1 { 0 } else { i };
            T::gemm(
                m,
                k,
                n,
                &xa[ai * m * k..(ai + 1) * m * k],
                k as isize,
                1,
                &xb[bi * k * n..(bi + 1) * k * n],
                n as isize,
                1,
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
                false,
            );
        }
        self.push(Tensor::new(vec![batch, m, n], out)?, Op::Bmm(a, b), "bmm")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!(
                "transpose needs rank >= 2, got {s:?}"
            )));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_blocks(self.value(x).data(), r, c);
        let mut shape = s.clone();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        self.push(Tensor::new(shape, data)?, Op::Transpose(x), "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// Joins two tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa
                .iter()
                .zip(&sb)
                .enumerate()
                .any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(Error::shape(format!(
                "concat: {sa:?} and {sb:?} along axis {axis}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let ia: usize = sa[axis..].iter().product();
        let ib: usize = sb[axis..].iter().product();
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(outer * (ia + ib));
        for o in 0..outer {
            data.extend_from_slice(&xa[o * ia..(o + 1) * ia]);
            data.extend_from_slice(&xb[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat { a, b, axis },
            "concat",
        )
    }

    /// 2-D cross-correlation of `[N, C, H, W]` with `[O, C, kh, kw]`, plus an
    /// optional per-output-channel bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(format!(
                "conv2d: input {sx:?} is incompatible with kernel {sw:?}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(format!(
                    "conv2d: bias {:?} does not match {} output channels",
                    self.shape(b),
                    sw[0]
                )));
            }
        }
        let (n, o) = (sx[0], sw[0]);
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, padding)?;
        let (rows, p) = (geom.rows(), geom.cols());
        let xin = self.value(x).data();
        let kernel = self.value(w).data();
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * p]
        };
        let sample = geom.c * geom.h * geom.w;
        for i in 0..n {
            let xs = &xin[i * sample..(i + 1) * sample];
            let src: &[T] = if geom.is_pointwise() {
                xs
            } else {
                im2col(xs, &geom, &mut cols);
                &cols
            };
            T::gemm(
                o,
                rows,
                p,
                kernel,
                rows as isize,
                1,
                src,
                p as isize,
                1,
                &mut out[i * o * p..(i + 1) * o * p],
                p as isize,
                1,
                false,
            );
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (chunk, &bias) in out.chunks_exact_mut(p).zip(bv.iter().cycle()) {
                for v in chunk {
                    *v += bias;
                }
            }
        }
        let t = Tensor::new(vec![n, o, geom.ho, geom.wo], out)?;
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b: bias,
                stride,
                padding,
            },
            "conv2d",
        )
    }

    /// Softmax along the last axis, computed with max-subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let len = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax of a scalar"))?;
        if len == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let mut out = vec![T::zero(); v.numel()];
        softmax_rows(v.data(), len, &mut out);
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(x), "softmax_lastdim")
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>, name: &'static str) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, op, name)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::tanh, Op::Tanh(x), "tanh")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.unary(
            x,
            move |e| if e > T::zero() { e } else { e * slope },
            Op::LeakyRelu(x, slope),
            "leaky_relu",
        )
    }

    /// `ln σ(x)` without forming σ(x).
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x), "log_sigmoid")
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), "mean")
    }

    /// Sums the last axis, keeping it with size 1.
    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let len = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("sum_lastdim of a scalar"))?;
        let data = if len == 0 {
            vec![T::zero(); v.numel()]
        } else {
            v.data()
                .chunks_exact(len)
                .map(|c| c.iter().copied().sum())
                .collect()
        };
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        self.push(Tensor::new(shape, data)?, Op::SumLastDim(x), "sum_lastdim")
    }

    /// Standardizes each `(sample, channel)` slice over its trailing axes.
    pub fn instance_standardize(&mut self, x: Var, eps: T) -> Result<Var> {
        let v = self.value(x);
        if v.rank() < 3 {
            return Err(Error::shape(format!(
                "instance norm expects [N, C, ...], got {:?}",
                v.shape()
            )));
        }
        let p: usize = v.shape()[2..].iter().product();
        if p == 0 {
            return Err(Error::shape("instance norm over empty spatial extent"));
        }
        let mut out = vec![T::zero(); v.numel()];
        for (src, dst) in v.data().chunks_exact(p).zip(out.chunks_exact_mut(p)) {
            let (mean, inv_std) = moments(src, eps);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv_std;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::InstanceNorm(x, eps), "instance_norm")
    }

    /// Gated linear unit over axis 1: first half ⊙ σ(second half).
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 2 || s[1] % 2 != 0 {
            return Err(Error::shape(format!(
                "glu needs an even channel axis, got {s:?}"
            )));
        }
        let half = s[1] / 2;
        let inner: usize = s[2..].iter().product();
        let block = half * inner;
        let mut out = Vec::with_capacity(v.numel() / 2);
        for sample in v.data().chunks_exact(2 * block) {
            let (a, b) = sample.split_at(block);
            out.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
        }
        let mut shape = s.to_vec();
        shape[1] = half;
        self.push(Tensor::new(shape, out)?, Op::Glu(x), "glu")
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!(
                "upsample expects [N, C, H, W], got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        let mut out = Vec::with_capacity(v.numel() * 4);
        for plane in v.data().chunks_exact(h * w) {
            for row in plane.chunks_exact(w) {
                let start = out.len();
                for &e in row {
                    out.push(e);
                    out.push(e);
                }
                out.extend_from_within(start..start + 2 * w);
            }
        }
        let shape = vec![s[0], s[1], 2 * h, 2 * w];
        self.push(
            Tensor::new(shape, out)?,
            Op::Upsample2(x),
            "upsample_nearest",
        )
    }

    /// 2×2 average pooling of `[N, C, H, W]` with even H and W.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape(format!(
                "avg_pool2 expects even [N, C, H, W], got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut out = Vec::with_capacity(v.numel() / 4);
        for plane in v.data().chunks_exact(h * w) {
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
                }
            }
        }
        let shape = vec![s[0], s[1], ho, wo];
        self.push(Tensor::new(shape, out)?, Op::AvgPool2(x), "avg_pool2")
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `∂root/∂leaf` into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign_b = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                if self.wants(a) {
                    reduce_broadcast(
                        slot(adj, a, self.value(a).numel()),
                        g,
                        &sa,
                        out.shape(),
                        T::one(),
                    );
                }
                if self.wants(b) {
                    reduce_broadcast(
                        slot(adj, b, self.value(b).numel()),
                        g,
                        &sb,
                        out.shape(),
                        sign_b,
                    );
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(a), self.value(b));
                let sa = broadcast_strides(xa.shape(), out.shape());
                let sb = broadcast_strides(xb.shape(), out.shape());
                if self.wants(a) {
                    let da = slot(adj, a, xa.numel());
                    let yb = xb.data();
                    for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| da[ia] += g[o] * yb[ib]);
                }
                if self.wants(b) {
                    let db = slot(adj, b, xb.numel());
                    let ya = xa.data();
                    for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| db[ib] += g[o] * ya[ia]);
                }
            }
            Op::Scale(x, s) => {
                let dx = slot(adj, x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, &e)| *d += e * s);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let dx = slot(adj, x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, &e)| *d += e);
            }
            Op::Bmm(a, b) => self.bmm_backward(a, b, g, adj),
            Op::Transpose(x) => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_blocks(g, r, c);
                let dx = slot(adj, x, g.len());
                dx.iter_mut().zip(&back).for_each(|(d, &e)| *d += e);
            }
            Op::Concat { a, b, axis } => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let outer: usize = sa[..axis].iter().product();
                let ia: usize = sa[axis..].iter().product();
                let ib: usize = sb[axis..].iter().product();
                if self.wants(a) {
                    let da = slot(adj, a, outer * ia);
                    for o in 0..outer {
                        let src = &g[o * (ia + ib)..o * (ia + ib) + ia];
                        da[o * ia..(o + 1) * ia]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &e)| *d += e);
                    }
                }
                if self.wants(b) {
                    let db = slot(adj, b, outer * ib);
                    for o in 0..outer {
                        let src = &g[o * (ia + ib) + ia..(o + 1) * (ia + ib)];
                        db[o * ib..(o + 1) * ib]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &e)| *d += e);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.conv_backward(x, w, b, stride, padding, g, adj)?,
            Op::Softmax(x) => {
                let len = *out.shape().last().unwrap();
                let dx = slot(adj, x, g.len());
                for ((y, gy), d) in out
                    .data()
                    .chunks_exact(len)
                    .zip(g.chunks_exact(len))
                    .zip(dx.chunks_exact_mut(len))
                {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for k in 0..len {
                        d[k] += y[k] * (gy[k] - dot);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let dx = slot(adj, x, g.len());
                for ((d, &y), &e) in dx.iter_mut().zip(out.data()).zip(g) {
                    *d += e * y * (T::one() - y);
                }
            }
            Op::Tanh(x) => {
                let dx = slot(adj, x, g.len());
                for ((d, &y), &e) in dx.iter_mut().zip(out.data()).zip(g) {
                    *d += e * (T::one() - y * y);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xin = self.value(x).data();
                let dx = slot(adj, x, g.len());
                for ((d, &v), &e) in dx.iter_mut().zip(xin).zip(g) {
                    *d += if v > T::zero() { e } else { e * slope };
                }
            }
            Op::LogSigmoid(x) => {
                let xin = self.value(x).data();
                let dx = slot(adj, x, g.len());
                for ((d, &v), &e) in dx.iter_mut().zip(xin).zip(g) {
                    *d += e * sigmoid(-v);
                }
            }
            Op::Sum(x) => {
                let n = self.value(x).numel();
                slot(adj, x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(x).numel();
                let e = g[0] / T::lit(n as f64);
                slot(adj, x, n).iter_mut().for_each(|d| *d += e);
            }
            Op::SumLastDim(x) => {
                let n = self.value(x).numel();
                let len = *self.shape(x).last().unwrap();
                let dx = slot(adj, x, n);
                if len > 0 {
                    for (d, &e) in dx.chunks_exact_mut(len).zip(g) {
                        d.iter_mut().for_each(|v| *v += e);
                    }
                }
            }
            Op::InstanceNorm(x, eps) => {
                let xin = self.value(x);
                let p: usize = xin.shape()[2..].iter().product();
                let pn = T::lit(p as f64);
                let dx = slot(adj, x, xin.numel());
                for ((src, gy), d) in xin
                    .data()
                    .chunks_exact(p)
                    .zip(g.chunks_exact(p))
                    .zip(dx.chunks_exact_mut(p))
                {
                    let (mean, inv_std) = moments(src, eps);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&s, &e) in src.iter().zip(gy) {
                        sum_g += e;
                        sum_gx += e * (s - mean) * inv_std;
                    }
                    for k in 0..p {
                        let xhat = (src[k] - mean) * inv_std;
                        d[k] += inv_std * (gy[k] - (sum_g + xhat * sum_gx) / pn);
                    }
                }
            }
            Op::Glu(x) => {
                let xin = self.value(x);
                let s = xin.shape();
                let block = s[1] / 2 * s[2..].iter().product::<usize>();
                let dx = slot(adj, x, xin.numel());
                for ((src, gy), d) in xin
                    .data()
                    .chunks_exact(2 * block)
                    .zip(g.chunks_exact(block))
                    .zip(dx.chunks_exact_mut(2 * block))
                {
                    let (a, b) = src.split_at(block);
                    let (da, db) = d.split_at_mut(block);
                    for k in 0..block {
                        let sg = sigmoid(b[k]);
                        da[k] += gy[k] * sg;
                        db[k] += gy[k] * a[k] * sg * (T::one() - sg);
                    }
                }
            }
            Op::Upsample2(x) => {
                let s = self.shape(x).to_vec();
                let (h, w) = (s[2], s[3]);
                let dx = slot(adj, x, s.iter().product());
                for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            plane[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                        }
                    }
                }
            }
            Op::AvgPool2(x) => {
                let s = self.shape(x).to_vec();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let dx = slot(adj, x, s.iter().product());
                for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(ho * wo)) {
                    for y in 0..h {
                        for xx in 0..w {
                            plane[y * w + xx] += gp[(y / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn bmm_backward(&self, a: Var, b: Var, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let (xa, xb) = (self.value(a), self.value(b));
        let (ba, m, k) = (xa.shape()[0], xa.shape()[1], xa.shape()[2]);
        let (bb, n) = (xb.shape()[0], xb.shape()[2]);
        let batch = ba.max(bb);
        if self.wants(a) {
            let da = slot(adj, a, xa.numel());
            for i in 0..batch {
                let ai = if ba == 1 { 0 } else { i };
                let bi = if bb == 1 { 0 } else { i };
                // dA = G · Bᵀ
                T::gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    &xb.data()[bi * k * n..(bi + 1) * k * n],
                    1,
                    n as isize,
                    &mut da[ai * m * k..(ai + 1) * m * k],
                    k as isize,
                    1,
                    true,
                );
            }
        }
        if self.wants(b) {
            let db = slot(adj, b, xb.numel());
            for i in 0..batch {
                let ai = if ba == 1 { 0 } else { i };
                let bi = if bb == 1 { 0 } else { i };
                // dB = Aᵀ · G
                T::gemm(
                    k,
                    m,
                    n,
                    &xa.data()[ai * m * k..(ai + 1) * m * k],
                    1,
                    k as isize,
                    &g[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    &mut db[bi * k * n..(bi + 1) * k * n],
                    n as isize,
                    1,
                    true,
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        g: &[T],
        adj: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        let (n, o) = (sx[0], sw[0]);
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, padding)?;
        let (rows, p) = (geom.rows(), geom.cols());
        let sample = geom.c * geom.h * geom.w;
        if let Some(b) = b {
            if self.wants(b) {
                let db = slot(adj, b, o);
                for (chunk, ch) in g.chunks_exact(p).zip((0..o).cycle()) {
                    db[ch] += chunk.iter().copied().sum::<T>();
                }
            }
        }
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); rows * p]
        };
        if self.wants(w) {
            let dw = slot(adj, w, wv.numel());
            for i in 0..n {
                let xs = &xv.data()[i * sample..(i + 1) * sample];
                let src: &[T] = if pointwise {
                    xs
                } else {
                    im2col(xs, &geom, &mut cols);
                    &cols
                };
                // dW += G_i · colsᵀ
                T::gemm(
                    o,
                    p,
                    rows,
                    &g[i * o * p..(i + 1) * o * p],
                    p as isize,
                    1,
                    src,
                    1,
                    p as isize,
                    dw,
                    rows as isize,
                    1,
                    true,
                );
            }
        }
        if self.wants(x) {
            let dx = slot(adj, x, xv.numel());
            let mut dcols = vec![T::zero(); rows * p];
            for i in 0..n {
                let gi = &g[i * o * p..(i + 1) * o * p];
                let dxs = &mut dx[i * sample..(i + 1) * sample];
                if pointwise {
                    // dX += Wᵀ · G_i, written straight into the sample.
                    T::gemm(
                        rows,
                        o,
                        p,
                        wv.data(),
                        1,
                        rows as isize,
                        gi,
                        p as isize,
                        1,
                        dxs,
                        p as isize,
                        1,
                        true,
                    );
                } else {
                    T::gemm(
                        rows,
                        o,
                        p,
                        wv.data(),
                        1,
                        rows as isize,
                        gi,
                        p as isize,
                        1,
                        &mut dcols,
                        p as isize,
                        1,
                        false,
                    );
                    col2im_add(&dcols, &geom, dxs);
                }
            }
        }
        Ok(())
    }
}

fn moments<T: Real>(src: &[T], eps: T) -> (T, T) {
    let pn = T::lit(src.len() as f64);
    let mean = src.iter().copied().sum::<T>() / pn;
    let var = src.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>() / pn;
    (mean, T::one() / (var + eps).sqrt())
}

fn slot<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn reduce_broadcast<T: Real>(dst: &mut [T], g: &[T], shape: &[usize], out: &[usize], sign: T) {
    if shape == out {
        dst.iter_mut().zip(g).for_each(|(d, &e)| *d += sign * e);
        return;
    }
    let s = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &s, &zeros, |o, i, _| dst[i] += sign * g[o]);
}

fn transpose_blocks<T: Real>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    if r * c == 0 {
        return out;
    }
    for (blk, dst) in src.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = blk[i * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[1, 2], &[1., 2.])).unwrap();
        let b = g.constant(t(&[2, 1], &[3., 4.])).unwrap();
        let d = g.matmul(a, b).unwrap();
        assert_eq!(g.value(d).data(), &[11.]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("by [2, 3]"), "{msg}");
    }

    #[test]
    fn conv_identity_and_summation() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(Tensor::from_fn(vec![1, 1, 3, 3], |i| i as f64 - 4.0))
            .unwrap();
        let k = g.constant(Tensor::ones(vec![1, 1, 1, 1])).unwrap();
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let ones = g.constant(Tensor::ones(vec![1, 1, 3, 3])).unwrap();
        let k3 = g.constant(Tensor::ones(vec![1, 1, 3, 3])).unwrap();
        let s = g.conv2d(ones, k3, None, 1, 0).unwrap();
        assert_eq!(g.value(s).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(s).data(), &[9.0]);
    }

    #[test]
    fn conv_fractional_output_is_shape_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 4, 4])).unwrap();
        let k = g.constant(Tensor::zeros(vec![1, 1, 3, 3])).unwrap();
        assert!(matches!(g.conv2d(x, k, None, 2, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., 0., 0.])).unwrap();
        let y = g.softmax_lastdim(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g
            .constant(t(&[3], &[1f64.ln(), 2f64.ln(), 4f64.ln()]))
            .unwrap();
        let y = g.softmax_lastdim(x).unwrap();
        let want = [1. / 7., 2. / 7., 4. / 7.];
        for (v, w) in g.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000., 0.])).unwrap();
        let y = g.softmax_lastdim(x).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(y).data()[1].abs() < 1e-12);
    }

    #[test]
    fn backward_simple_sums() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[4], &[1., -2., 3., 0.5])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1., 1., 1.]);

        g.zero_grad();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., -4., 6., 1.]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 2.]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // f = sum(x) + sum(x): grad is 2 everywhere
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1., 2., 3.])).unwrap();
        let a = g.sum(x).unwrap();
        let b = g.sum(x).unwrap();
        let f = g.add(a, b).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 2., 2.]);
    }

    #[test]
    fn non_finite_names_the_op() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[1e308])).unwrap();
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFinite {
                op: "scale",
                index: 0
            }
        ));
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        let y = g.upsample_nearest2(x).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }
}
