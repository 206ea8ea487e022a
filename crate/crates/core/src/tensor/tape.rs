use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Clamp(Var, T, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Conv3 {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Pool3 {
        x: Var,
        kind: PoolKind,
        window: usize,
        stride: usize,
        src: Vec<usize>,
    },
    Reduce {
        x: Var,
        axis: usize,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    Gather {
        x: Var,
        src: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | Shift(a) | Exp(a) | Log(a) | Relu(a) | Gelu(a) | Clamp(a, _, _)
            | Transpose(a) | Reshape(a) | Softmax(a, _) | LogSoftmax(a, _) | SumAll(a)
            | MeanAll(a) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Conv3 { x, w, .. } => vec![*x, *w],
            Pool3 { x, .. } | Reduce { x, .. } | Gather { x, .. } | Narrow { x, .. } => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    #[cfg(debug_assertions)]
    finite: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse. Nodes are appended only, so inputs always precede their consumers.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves that requested them, keyed by their handles.
#[derive(Debug, Default)]
pub struct Gradients<T: Real> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape()
}

fn reduce_to<T: Real>(g: &[T], in_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    if in_shape == out_shape {
        return g.to_vec();
    }
    let n: usize = in_shape.iter().product();
    let mut r = vec![T::zero(); n];
    for (o, off) in kernels::broadcast_offsets(in_shape, out_shape).into_iter().enumerate() {
        r[off] += g[o];
    }
    r
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        #[cfg(debug_assertions)]
        let finite = {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].finite);
            let finite = value.is_finite();
            debug_assert!(
                !inputs_finite || finite,
                "non-finite output from finite inputs (node {})",
                self.nodes.len()
            );
            finite
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            #[cfg(debug_assertions)]
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            #[cfg(debug_assertions)]
            finite: value.is_finite(),
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// A value treated as constant by `backward`.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if same(ta, tb) {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            let shape = kernels::broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                Error::Dimension {
                    op: name,
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                }
            })?;
            let oa = kernels::broadcast_offsets(ta.shape(), &shape);
            let ob = kernels::broadcast_offsets(tb.shape(), &shape);
            let (da, db) = (ta.data(), tb.data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        self.unary(a, |x| x + s, Op::Shift(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        self.unary(
            a,
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary(a, move |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("transpose expects rank 2, got {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let value = Tensor::new(vec![c, r], transpose2(t.data(), r, c))?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        let rank = self.value(a).rank();
        if axis >= rank {
            return Err(Error::Shape(format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let t = self.value(a);
        let data = softmax_axis(t.data(), t.shape(), axis, false);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(a, axis)))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let t = self.value(a);
        let data = softmax_axis(t.data(), t.shape(), axis, true);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax(a, axis)))
    }

    /// Normalizes along `axis` to zero mean and unit variance, then applies a
    /// per-position gain and bias (both of length `shape[axis]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = kernels::axis_split(t.shape(), axis);
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let xd = t.data();
        let eps = T::lit(LAYER_NORM_EPS);
        let nf = T::lit(n as f64);
        let mut mean = vec![T::zero(); outer * inner];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            let mu = &mut mean[o * inner..(o + 1) * inner];
            let rs = &mut rstd[o * inner..(o + 1) * inner];
            for j in 0..n {
                let row = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (m, &v) in mu.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mu.iter_mut().for_each(|m| *m = *m / nf);
            for j in 0..n {
                let row = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                for ((r, &v), &m) in rs.iter_mut().zip(row).zip(mu.iter()) {
                    let d = v - m;
                    *r += d * d;
                }
            }
            rs.iter_mut().for_each(|r| *r = T::one() / (*r / nf + eps).sqrt());
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    let xh = (xd[base + i] - mu[i]) * rs[i];
                    out[base + i] = xh * g[j] + b[j];
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                mean,
                rstd,
            },
        ))
    }

    /// 3D cross-correlation of `x: [c_in, D, H, W]` with `w: [c_out, c_in, k, k, k]`.
    pub fn conv3(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(Error::Dimension {
                op: "conv3",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let k = sw[2];
        let mut out_dims = [0; 3];
        for i in 0..3 {
            out_dims[i] = kernels::window_extent(sx[i + 1], k, stride, pad).ok_or_else(|| {
                Error::Shape(format!(
                    "conv3 kernel {k} (stride {stride}, pad {pad}) does not fit input {sx:?}"
                ))
            })?;
        }
        let geom = ConvGeom {
            c_in: sx[0],
            dims: [sx[1], sx[2], sx[3]],
            k,
            stride,
            pad,
            out: out_dims,
        };
        let c_out = sw[0];
        let ov = geom.out_voxels();
        let mut out = vec![T::zero(); c_out * ov];
        if geom.is_pointwise() {
            kernels::matmul(tw.data(), tx.data(), &mut out, c_out, geom.c_in, ov);
        } else {
            let mut col = vec![T::zero(); geom.col_rows() * ov];
            kernels::im2col(tx.data(), &geom, &mut col);
            kernels::matmul(tw.data(), &col, &mut out, c_out, geom.col_rows(), ov);
        }
        let value = Tensor::new(vec![c_out, out_dims[0], out_dims[1], out_dims[2]], out)?;
        Ok(self.push(value, Op::Conv3 { x, w, geom }))
    }

    /// Windowed pooling over the three trailing axes of `[C, D, H, W]`.
    pub fn pool3(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("pool3 expects [C,D,H,W], got {s:?}")));
        }
        let mut od = [0; 3];
        for i in 0..3 {
            od[i] = kernels::window_extent(s[i + 1], window, stride, 0).ok_or_else(|| {
                Error::Shape(format!("pool window {window} larger than input {s:?}"))
            })?;
        }
        let (c, [d, h, w]) = (s[0], [s[1], s[2], s[3]]);
        let ov: usize = od.iter().product();
        let xd = t.data();
        let mut out = Vec::with_capacity(c * ov);
        let mut src = Vec::new();
        let inv = T::lit(1.0 / (window * window * window) as f64);
        for ch in 0..c {
            for oz in 0..od[0] {
                for oy in 0..od[1] {
                    for ox in 0..od[2] {
                        let mut best = T::neg_infinity();
                        let mut best_at = 0;
                        let mut acc = T::zero();
                        for kz in 0..window {
                            for ky in 0..window {
                                for kx in 0..window {
                                    let (iz, iy, ix) =
                                        (oz * stride + kz, oy * stride + ky, ox * stride + kx);
                                    let at = ((ch * d + iz) * h + iy) * w + ix;
                                    let v = xd[at];
                                    acc += v;
                                    if v > best {
                                        best = v;
                                        best_at = at;
                                    }
                                }
                            }
                        }
                        match kind {
                            PoolKind::Max => {
                                out.push(best);
                                src.push(best_at);
                            }
                            PoolKind::Avg => out.push(acc * inv),
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![c, od[0], od[1], od[2]], out)?;
        Ok(self.push(
            value,
            Op::Pool3 {
                x,
                kind,
                window,
                stride,
                src,
            },
        ))
    }

    /// Reduces `axis` away (sum, mean or max; max ties go to the lowest index).
    pub fn reduce(&mut self, x: Var, axis: usize, kind: ReduceKind) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = kernels::axis_split(t.shape(), axis);
        let xd = t.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let row = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = T::lit(1.0 / n as f64);
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceKind::Max => {
                argmax = vec![0usize; outer * inner];
                out.iter_mut().for_each(|v| *v = T::neg_infinity());
                for o in 0..outer {
                    for j in 0..n {
                        let row = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (i, &v) in row.iter().enumerate() {
                            if v > out[o * inner + i] {
                                out[o * inner + i] = v;
                                argmax[o * inner + i] = j;
                            }
                        }
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Reduce {
                x,
                axis,
                kind,
                argmax,
            },
        ))
    }

    /// Global pooling of `[C, ...]` over every trailing axis, giving `[C]`.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("global pool expects [C, ...], got {s:?}")));
        }
        let flat = self.reshape(x, vec![s[0], s[1..].iter().product()])?;
        let kind = match kind {
            PoolKind::Max => ReduceKind::Max,
            PoolKind::Avg => ReduceKind::Mean,
        };
        self.reduce(flat, 1, kind)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::MeanAll(x))
    }

    /// Nearest-neighbour resampling of `[C, s1, .., sr]` to `[C, t1, .., tr]`.
    pub fn interpolate_nearest(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != target.len() + 1 || target.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "cannot resample {s:?} to spatial extents {target:?}"
            )));
        }
        let src = nearest_map(s, target);
        let xd = t.data();
        let data = src.iter().map(|&i| xd[i]).collect();
        let mut shape = vec![s[0]];
        shape.extend_from_slice(target);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { x, src }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = kernels::axis_split(t.shape(), axis);
        if start + len > n {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) exceeds axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let xd = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }))
    }

    /// One-hot of the per-position argmax along `axis` (lowest index wins ties).
    /// The result is a constant: no gradient flows back through the selection.
    pub fn argmax_onehot(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = kernels::axis_split(t.shape(), axis);
        let xd = t.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..n {
                    if xd[(o * n + j) * inner + i] > xd[(o * n + best) * inner + i] {
                        best = j;
                    }
                }
                out[(o * n + best) * inner + i] = T::one();
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.constant(value))
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns gradients for every
    /// leaf created with [`Tape::leaf`], then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    out.grads.insert(Var(i), Tensor::new(y.shape().to_vec(), g)?);
                }
                Op::Add(a, b) => {
                    let s = y.shape();
                    let ga = reduce_to(&g, self.shape(*a), s);
                    let gb = reduce_to(&g, self.shape(*b), s);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    let s = y.shape();
                    let ga = reduce_to(&g, self.shape(*a), s);
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    let gb = reduce_to(&neg, self.shape(*b), s);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let div = matches!(node.op, Op::Div(..));
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let s = y.shape();
                    let (ga, gb) = if same(ta, tb) {
                        let (da, db) = (ta.data(), tb.data());
                        if div {
                            (
                                g.iter().zip(db).map(|(&g, &b)| g / b).collect(),
                                g.iter()
                                    .zip(da.iter().zip(db))
                                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                                    .collect(),
                            )
                        } else {
                            (
                                g.iter().zip(db).map(|(&g, &b)| g * b).collect(),
                                g.iter().zip(da).map(|(&g, &a)| g * a).collect(),
                            )
                        }
                    } else {
                        let oa = kernels::broadcast_offsets(ta.shape(), s);
                        let ob = kernels::broadcast_offsets(tb.shape(), s);
                        let (da, db) = (ta.data(), tb.data());
                        let mut ga = vec![T::zero(); ta.numel()];
                        let mut gb = vec![T::zero(); tb.numel()];
                        for (o, &gv) in g.iter().enumerate() {
                            let (x, z) = (da[oa[o]], db[ob[o]]);
                            if div {
                                ga[oa[o]] += gv / z;
                                gb[ob[o]] += -gv * x / (z * z);
                            } else {
                                ga[oa[o]] += gv * z;
                                gb[ob[o]] += gv * x;
                            }
                        }
                        (ga, gb)
                    };
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.acc(&mut grads, *a, g.iter().map(|&v| v * s).collect());
                }
                Op::Shift(a) | Op::Reshape(a) => self.acc(&mut grads, *a, g),
                Op::Exp(a) => {
                    let ga = g.iter().zip(y.data()).map(|(&g, &y)| g * y).collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    let ga = g.iter().zip(x).map(|(&g, &x)| g / x).collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a).data();
                    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                    let three = T::lit(3.0);
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                            g * (half * (T::one() + t) + half * x * dt)
                        })
                        .collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a).data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { T::zero() })
                        .collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    let mut ga = vec![T::zero(); m * k];
                    let mut gb = vec![T::zero(); k * n];
                    if self.nodes[a.0].needs_grad {
                        // dA = G·Bᵀ
                        T::gemm(
                            m, n, k, T::one(), &g, n as isize, 1, tb.data(), 1, n as isize,
                            T::zero(), &mut ga, k as isize, 1,
                        );
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB = Aᵀ·G
                        T::gemm(
                            k, m, n, T::one(), ta.data(), 1, k as isize, &g, n as isize, 1,
                            T::zero(), &mut gb, n as isize, 1,
                        );
                    }
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => {
                    let (r, c) = (y.shape()[0], y.shape()[1]);
                    self.acc(&mut grads, *a, transpose2(&g, r, c));
                }
                Op::Softmax(a, axis) => {
                    let (outer, n, inner) = kernels::axis_split(y.shape(), *axis);
                    let yd = y.data();
                    let mut ga = vec![T::zero(); yd.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = T::zero();
                            for j in 0..n {
                                let at = (o * n + j) * inner + i;
                                dot += g[at] * yd[at];
                            }
                            for j in 0..n {
                                let at = (o * n + j) * inner + i;
                                ga[at] = yd[at] * (g[at] - dot);
                            }
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a, axis) => {
                    let (outer, n, inner) = kernels::axis_split(y.shape(), *axis);
                    let yd = y.data();
                    let mut ga = vec![T::zero(); yd.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut total = T::zero();
                            for j in 0..n {
                                total += g[(o * n + j) * inner + i];
                            }
                            for j in 0..n {
                                let at = (o * n + j) * inner + i;
                                ga[at] = g[at] - yd[at].exp() * total;
                            }
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    axis,
                    mean,
                    rstd,
                } => {
                    let tx = self.value(*x);
                    let (outer, n, inner) = kernels::axis_split(tx.shape(), *axis);
                    let xd = tx.data();
                    let gd = self.value(*gain).data();
                    let nf = T::lit(n as f64);
                    let mut gx = vec![T::zero(); xd.len()];
                    let mut gg = vec![T::zero(); n];
                    let mut gbias = vec![T::zero(); n];
                    let mut s1 = vec![T::zero(); inner];
                    let mut s2 = vec![T::zero(); inner];
                    for o in 0..outer {
                        let mu = &mean[o * inner..(o + 1) * inner];
                        let rs = &rstd[o * inner..(o + 1) * inner];
                        s1.iter_mut().for_each(|v| *v = T::zero());
                        s2.iter_mut().for_each(|v| *v = T::zero());
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for i in 0..inner {
                                let xh = (xd[base + i] - mu[i]) * rs[i];
                                let go = g[base + i];
                                gg[j] += go * xh;
                                gbias[j] += go;
                                let dy = go * gd[j];
                                s1[i] += dy;
                                s2[i] += dy * xh;
                            }
                        }
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for i in 0..inner {
                                let xh = (xd[base + i] - mu[i]) * rs[i];
                                let dy = g[base + i] * gd[j];
                                gx[base + i] = rs[i] * (dy - s1[i] / nf - xh * s2[i] / nf);
                            }
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                    self.acc(&mut grads, *gain, gg);
                    self.acc(&mut grads, *bias, gbias);
                }
                Op::Conv3 { x, w, geom } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let c_out = tw.shape()[0];
                    let rows = geom.col_rows();
                    let ov = geom.out_voxels();
                    let col_owned;
                    let col: &[T] = if geom.is_pointwise() {
                        tx.data()
                    } else {
                        let mut c = vec![T::zero(); rows * ov];
                        kernels::im2col(tx.data(), geom, &mut c);
                        col_owned = c;
                        &col_owned
                    };
                    let mut gw = vec![T::zero(); c_out * rows];
                    if self.nodes[w.0].needs_grad {
                        // dW = G·colᵀ
                        T::gemm(
                            c_out, ov, rows, T::one(), &g, ov as isize, 1, col, 1, ov as isize,
                            T::zero(), &mut gw, rows as isize, 1,
                        );
                    }
                    let mut gx = vec![T::zero(); geom.c_in * geom.in_voxels()];
                    if self.nodes[x.0].needs_grad {
                        // dcol = Wᵀ·G
                        let mut dcol = vec![T::zero(); rows * ov];
                        T::gemm(
                            rows, c_out, ov, T::one(), tw.data(), 1, rows as isize, &g,
                            ov as isize, 1, T::zero(), &mut dcol, ov as isize, 1,
                        );
                        if geom.is_pointwise() {
                            gx = dcol;
                        } else {
                            kernels::col2im(&dcol, geom, &mut gx);
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                    self.acc(&mut grads, *w, gw);
                }
                Op::Pool3 {
                    x,
                    kind,
                    window,
                    stride,
                    src,
                } => {
                    let tx = self.value(*x);
                    let mut gx = vec![T::zero(); tx.numel()];
                    match kind {
                        PoolKind::Max => {
                            for (o, &at) in src.iter().enumerate() {
                                gx[at] += g[o];
                            }
                        }
                        PoolKind::Avg => {
                            let s = tx.shape();
                            let [d, h, w] = [s[1], s[2], s[3]];
                            let od = y.shape();
                            let stride = *stride;
                            let inv = T::lit(1.0 / (window * window * window) as f64);
                            let mut o = 0;
                            for ch in 0..s[0] {
                                for oz in 0..od[1] {
                                    for oy in 0..od[2] {
                                        for ox in 0..od[3] {
                                            let gv = g[o] * inv;
                                            o += 1;
                                            for kz in 0..*window {
                                                for ky in 0..*window {
                                                    for kx in 0..*window {
                                                        let at = ((ch * d + oz * stride + kz) * h
                                                            + oy * stride
                                                            + ky)
                                                            * w
                                                            + ox * stride
                                                            + kx;
                                                        gx[at] += gv;
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Reduce {
                    x,
                    axis,
                    kind,
                    argmax,
                } => {
                    let tx = self.value(*x);
                    let (outer, n, inner) = kernels::axis_split(tx.shape(), *axis);
                    let mut gx = vec![T::zero(); tx.numel()];
                    let scale = match kind {
                        ReduceKind::Mean => T::lit(1.0 / n as f64),
                        _ => T::one(),
                    };
                    for o in 0..outer {
                        for i in 0..inner {
                            let gv = g[o * inner + i] * scale;
                            match kind {
                                ReduceKind::Max => {
                                    let j = argmax[o * inner + i];
                                    gx[(o * n + j) * inner + i] += gv;
                                }
                                _ => {
                                    for j in 0..n {
                                        gx[(o * n + j) * inner + i] += gv;
                                    }
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::SumAll(x) | Op::MeanAll(x) => {
                    let n = self.value(*x).numel();
                    let gv = if matches!(node.op, Op::MeanAll(_)) {
                        g[0] / T::lit(n as f64)
                    } else {
                        g[0]
                    };
                    self.acc(&mut grads, *x, vec![gv; n]);
                }
                Op::Gather { x, src } => {
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    for (o, &at) in src.iter().enumerate() {
                        gx[at] += g[o];
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = kernels::axis_split(y.shape(), *axis);
                    let lens: Vec<usize> = inputs.iter().map(|v| self.shape(*v)[*axis]).collect();
                    let total: usize = lens.iter().sum();
                    let mut offset = 0;
                    for (v, &len) in inputs.iter().zip(&lens) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[start..start + len * inner]);
                        }
                        offset += len;
                        self.acc(&mut grads, *v, gv);
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let tx = self.value(*x);
                    let (outer, n, inner) = kernels::axis_split(tx.shape(), *axis);
                    let len = y.shape()[*axis];
                    let mut gx = vec![T::zero(); tx.numel()];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        gx[dst..dst + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.acc(&mut grads, *x, gx);
                }
            }
        }
        self.nodes.clear();
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}

fn transpose2<T: Real>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn softmax_axis<T: Real>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = kernels::axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    let mut mx = vec![T::zero(); inner];
    let mut total = vec![T::zero(); inner];
    for o in 0..outer {
        mx.iter_mut().for_each(|v| *v = T::neg_infinity());
        total.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..n {
            let row = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (m, &v) in mx.iter_mut().zip(row) {
                if v > *m {
                    *m = v;
                }
            }
        }
        for j in 0..n {
            let base = (o * n + j) * inner;
            for i in 0..inner {
                let e = (x[base + i] - mx[i]).exp();
                out[base + i] = e;
                total[i] += e;
            }
        }
        for j in 0..n {
            let base = (o * n + j) * inner;
            for i in 0..inner {
                out[base + i] = if log {
                    x[base + i] - mx[i] - total[i].ln()
                } else {
                    out[base + i] / total[i]
                };
            }
        }
    }
    out
}

/// Flat source offsets for nearest resampling of `[C, spatial..]` to `target`.
fn nearest_map(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let c = shape[0];
    let src_sp = &shape[1..];
    let per_axis: Vec<Vec<usize>> = src_sp
        .iter()
        .zip(target)
        .map(|(&s, &t)| (0..t).map(|i| kernels::nearest_src(i, s, t)).collect())
        .collect();
    let mut src_strides = vec![1usize; src_sp.len()];
    for i in (0..src_sp.len().saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_sp[i + 1];
    }
    let src_vox: usize = src_sp.iter().product();
    let dst_vox: usize = target.iter().product();
    let mut spatial = Vec::with_capacity(dst_vox);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..dst_vox {
        let off: usize = idx
            .iter()
            .enumerate()
            .map(|(a, &i)| per_axis[a][i] * src_strides[a])
            .sum();
        spatial.push(off);
        for a in (0..target.len()).rev() {
            idx[a] += 1;
            if idx[a] < target[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    let mut out = Vec::with_capacity(c * dst_vox);
    for ch in 0..c {
        out.extend(spatial.iter().map(|&o| ch * src_vox + o));
    }
    out
}
