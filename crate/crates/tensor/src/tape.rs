use crate::broadcast::{broadcast_shape, plan};
use crate::conv::{col2im, im2col, nchw_to_rows, rows_to_nchw, ConvGeom};
use crate::error::{Result, TensorError};
use crate::real::{gemm, pairwise_sum, Real};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Scale(T),
    AddScalar,
    Clamp(T, T),
}

enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary<T>, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        // geometry of the adjoint convolution (output -> input)
        geom: ConvGeom,
        x_rows: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run record of a forward computation.
///
/// Nodes are appended in execution order, so the record is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the differentiable leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, zero-filled if it did not influence the loss.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    (numel(shape) / last, last)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
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

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        finite(name, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    // ---- elementwise binary -------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape =
            broadcast_shape(sa, sb).ok_or_else(|| TensorError::shape(name, &[sa, sb]))?;
        let pa = plan(&out_shape, sa);
        let pb = plan(&out_shape, sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<T> = (0..n).map(|i| f(da[pa.index(i)], db[pb.index(i)])).collect();
        self.push(
            name,
            Tensor::from_parts(out_shape, data),
            Op::Binary(kind, a, b),
            &[a, b],
        )
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

    // ---- elementwise unary --------------------------------------------

    fn unary(&mut self, kind: Unary<T>, x: Var) -> Result<Var> {
        let name = match kind {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Scale(_) => "scale",
            Unary::AddScalar => "add_scalar",
            Unary::Clamp(..) => "clamp",
        };
        let value = match kind {
            Unary::Relu => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Unary::Sigmoid => self.value(x).map(sigmoid),
            Unary::Tanh => self.value(x).map(|v| v.tanh()),
            Unary::Exp => self.value(x).map(|v| v.exp()),
            Unary::Log => self.value(x).map(|v| v.ln()),
            Unary::Square => self.value(x).map(|v| v * v),
            Unary::Scale(c) => self.value(x).map(|v| v * c),
            Unary::AddScalar => unreachable!("add_scalar builds its own value"),
            Unary::Clamp(lo, hi) => self.value(x).map(|v| v.max(lo).min(hi)),
        };
        self.push(name, value, Op::Unary(kind, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Scale(-T::one()), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, Op::Unary(Unary::AddScalar, x), &[x])
    }

    /// Elementwise clamp; gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::contract("clamp", "lower bound exceeds upper bound"));
        }
        self.unary(Unary::Clamp(lo, hi), x)
    }

    // ---- linear algebra -----------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::shape("transpose", &[s]));
        }
        let out = transpose2(self.value(x).data(), s[0], s[1]);
        let shape = vec![s[1], s[0]];
        self.push("transpose", Tensor::from_parts(shape, out), Op::Transpose(x), &[x])
    }

    /// `x @ w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    // ---- convolution --------------------------------------------------

    /// 2-D convolution of `x: [n, c_in, h, w]` with `w: [c_out, c_in, kh, kw]`
    /// and optional bias `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let bad = || TensorError::shape("conv2d", &[sx, sw]);
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(bad());
        }
        let geom = ConvGeom::forward(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, pad)
            .ok_or_else(bad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(TensorError::shape("conv2d", &[sw, self.shape(b)]));
            }
        }
        let mut cols = vec![T::zero(); geom.rows() * geom.patch()];
        im2col(self.value(x).data(), &geom, &mut cols);
        let mut rows = vec![T::zero(); geom.rows() * geom.c_out];
        gemm(
            geom.rows(),
            geom.patch(),
            geom.c_out,
            &cols,
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut rows,
        );
        let hw = geom.out_h * geom.out_w;
        let mut out = rows_to_nchw(&rows, geom.n, geom.c_out, hw);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), hw);
        }
        let shape = vec![geom.n, geom.c_out, geom.out_h, geom.out_w];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv2d",
            Tensor::from_parts(shape, out),
            Op::Conv2d { x, w, b, geom, cols },
            &inputs,
        )
    }

    /// Transposed 2-D convolution of `x: [n, c_in, h, w]` with
    /// `w: [c_in, c_out, kh, kw]`; output extent `(h - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let bad = || TensorError::shape("conv_transpose2d", &[sx, sw]);
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(bad());
        }
        let (n, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[1], sw[2], sw[3]);
        let oh = ((h - 1) * stride + kh).checked_sub(2 * pad).filter(|&v| v > 0).ok_or_else(bad)?;
        let ow = ((wd - 1) * stride + kw).checked_sub(2 * pad).filter(|&v| v > 0).ok_or_else(bad)?;
        let geom = ConvGeom {
            n,
            c_in: c_out,
            h: oh,
            w: ow,
            c_out: c_in,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(TensorError::shape("conv_transpose2d", &[sw, self.shape(b)]));
            }
        }
        let x_rows = nchw_to_rows(self.value(x).data(), n, c_in, h * wd);
        let mut cols = vec![T::zero(); geom.rows() * geom.patch()];
        gemm(geom.rows(), c_in, geom.patch(), &x_rows, false, self.value(w).data(), false, T::zero(), &mut cols);
        let mut out = vec![T::zero(); n * c_out * oh * ow];
        col2im(&cols, &geom, &mut out);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), oh * ow);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv_transpose2d",
            Tensor::from_parts(vec![n, c_out, oh, ow], out),
            Op::ConvTranspose2d { x, w, b, geom, x_rows },
            &inputs,
        )
    }

    // ---- last-axis normalizers ----------------------------------------

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows(self.value(x));
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, last) = last_axis(t.shape());
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * last..(r + 1) * last];
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Log-sum-exp over the last axis, which is removed.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, last) = last_axis(t.shape());
        let out: Vec<T> = (0..rows).map(|r| logsumexp(&t.data()[r * last..(r + 1) * last])).collect();
        let shape = t.shape()[..t.ndim().saturating_sub(1)].to_vec();
        self.push("logsumexp", Tensor::from_parts(shape, out), Op::LogSumExp(x), &[x])
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = pairwise_sum(self.value(x).data());
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = pairwise_sum(t.data());
        let m = s / T::from_usize(t.len()).unwrap();
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sum over the last axis, which is removed.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, last) = last_axis(t.shape());
        let out: Vec<T> = (0..rows)
            .map(|r| pairwise_sum(&t.data()[r * last..(r + 1) * last]))
            .collect();
        let shape = t.shape()[..t.ndim().saturating_sub(1)].to_vec();
        self.push("sum_last", Tensor::from_parts(shape, out), Op::SumLast(x), &[x])
    }

    // ---- shape manipulation -------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel(shape) != t.len() || shape.contains(&0) {
            return Err(TensorError::shape("reshape", &[t.shape(), shape]));
        }
        let value = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::contract("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", &[&base]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                return Err(TensorError::shape("concat", &shapes));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(TensorError::contract(
                "slice",
                format!("range {start}..{end} on axis {axis} of shape {s:?}"),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&data[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        self.push(
            "slice",
            Tensor::from_parts(shape, out),
            Op::Slice { x, axis, start },
            &[x],
        )
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        // keep only leaf gradients
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let pa = plan(out.shape(), va.shape());
                let pb = plan(out.shape(), vb.shape());
                let gd = g.data();
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); va.len()];
                    for (i, &gi) in gd.iter().enumerate() {
                        let ia = pa.index(i);
                        ga[ia] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * vb.data()[pb.index(i)],
                            Binary::Div => gi / vb.data()[pb.index(i)],
                        };
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    for (i, &gi) in gd.iter().enumerate() {
                        let ib = pb.index(i);
                        gb[ib] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * va.data()[pa.index(i)],
                            Binary::Div => {
                                let y = vb.data()[ib];
                                -gi * va.data()[pa.index(i)] / (y * y)
                            }
                        };
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
                }
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let y = out.data();
                let gd = g.data();
                let gx: Vec<T> = (0..gd.len())
                    .map(|i| {
                        let gi = gd[i];
                        match *kind {
                            Unary::Relu => {
                                if xv[i] > T::zero() {
                                    gi
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sigmoid => gi * y[i] * (T::one() - y[i]),
                            Unary::Tanh => gi * (T::one() - y[i] * y[i]),
                            Unary::Exp => gi * y[i],
                            Unary::Log => gi / xv[i],
                            Unary::Square => gi * (xv[i] + xv[i]),
                            Unary::Scale(c) => gi * c,
                            Unary::AddScalar => gi,
                            Unary::Clamp(lo, hi) => {
                                if xv[i] >= lo && xv[i] <= hi {
                                    gi
                                } else {
                                    T::zero()
                                }
                            }
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, T::zero(), &mut ga);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, T::zero(), &mut gb);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(x) => {
                let s = out.shape();
                let gx = transpose2(g.data(), s[0], s[1]);
                self.accumulate(grads, *x, Tensor::from_parts(vec![s[1], s[0]], gx));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let hw = geom.out_h * geom.out_w;
                let g_rows = nchw_to_rows(g.data(), geom.n, geom.c_out, hw);
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); geom.c_out * geom.patch()];
                    gemm(geom.c_out, geom.rows(), geom.patch(), &g_rows, true, cols, false, T::zero(), &mut gw);
                    self.accumulate(grads, *w, Tensor::from_parts(self.shape(*w).to_vec(), gw));
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![T::zero(); geom.rows() * geom.patch()];
                    gemm(
                        geom.rows(),
                        geom.c_out,
                        geom.patch(),
                        &g_rows,
                        false,
                        self.value(*w).data(),
                        false,
                        T::zero(),
                        &mut gcols,
                    );
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    col2im(&gcols, geom, &mut gx);
                    self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
                }
                if let Some(b) = b {
                    let gb = channel_sums(g.data(), geom.n, geom.c_out, hw);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![geom.c_out], gb));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, x_rows } => {
                // geom maps the output back to the input: c_in here is the
                // transposed layer's output channel count.
                let c_x = geom.c_out;
                let mut gcols = vec![T::zero(); geom.rows() * geom.patch()];
                im2col(g.data(), geom, &mut gcols);
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); c_x * geom.patch()];
                    gemm(c_x, geom.rows(), geom.patch(), x_rows, true, &gcols, false, T::zero(), &mut gw);
                    self.accumulate(grads, *w, Tensor::from_parts(self.shape(*w).to_vec(), gw));
                }
                if self.requires_grad(*x) {
                    let mut gx_rows = vec![T::zero(); geom.rows() * c_x];
                    gemm(
                        geom.rows(),
                        geom.patch(),
                        c_x,
                        &gcols,
                        false,
                        self.value(*w).data(),
                        true,
                        T::zero(),
                        &mut gx_rows,
                    );
                    let gx = rows_to_nchw(&gx_rows, geom.n, c_x, geom.out_h * geom.out_w);
                    self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
                }
                if let Some(b) = b {
                    let gb = channel_sums(g.data(), geom.n, geom.c_in, geom.h * geom.w);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![geom.c_in], gb));
                }
            }
            Op::Softmax(x) => {
                let (rows, last) = last_axis(out.shape());
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let s = r * last..(r + 1) * last;
                    let dot: T = y[s.clone()].iter().zip(&gd[s.clone()]).map(|(&a, &b)| a * b).sum();
                    for i in s {
                        gx[i] = y[i] * (gd[i] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::LogSoftmax(x) => {
                let (rows, last) = last_axis(out.shape());
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let s = r * last..(r + 1) * last;
                    let total: T = gd[s.clone()].iter().copied().sum();
                    for i in s {
                        gx[i] = gd[i] - y[i].exp() * total;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::LogSumExp(x) => {
                let xv = self.value(*x);
                let (rows, last) = last_axis(xv.shape());
                let mut gx = vec![T::zero(); xv.len()];
                for r in 0..rows {
                    let lse = out.data()[r];
                    for i in r * last..(r + 1) * last {
                        gx[i] = g.data()[r] * (xv.data()[i] - lse).exp();
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::Sum(x) => {
                let gi = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gi));
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                let gi = g.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gi));
            }
            Op::SumLast(x) => {
                let s = self.shape(*x);
                let (rows, last) = last_axis(s);
                let mut gx = Vec::with_capacity(rows * last);
                for r in 0..rows {
                    gx.extend(std::iter::repeat_n(g.data()[r], last));
                }
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), gx));
            }
            Op::Reshape(x) => {
                let gx = Tensor::from_parts(self.shape(*x).to_vec(), g.data().to_vec());
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { inputs, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let row = s[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let sv = self.shape(v);
                    let block = sv[*axis] * inner;
                    if self.requires_grad(v) {
                        let mut gv = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * row + offset;
                            gv.extend_from_slice(&g.data()[base..base + block]);
                        }
                        self.accumulate(grads, v, Tensor::from_parts(sv.to_vec(), gv));
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let width = out.shape()[*axis] * inner;
                let mut gx = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    let base = o * s[*axis] * inner + start * inner;
                    gx[base..base + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), gx));
            }
        }
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn logsumexp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

fn softmax_rows<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (rows, last) = last_axis(t.shape());
    let mut out = t.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * last..(r + 1) * last];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn transpose2<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], hw: usize) {
    let c = bias.len();
    for (i, plane) in out.chunks_mut(hw).enumerate() {
        let b = bias[i % c];
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<T: Real>(g: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let plane = &g[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            *o += pairwise_sum(plane);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a_val = t(&[3, 3], &[1., -2., 3., 4.5, 5., 6., -7., 8., 9.25]);
        let a = tape.constant(a_val.clone());
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(y), &a_val);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                shapes: vec![vec![2, 3], vec![2, 3]]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn conv2d_ones_window_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones([1, 1, 4, 4]));
        let w = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let y = tape.conv2d(x, w, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn conv_transpose_doubles_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::ones([2, 4, 16, 16]));
        let w = tape.constant(Tensor::ones([4, 3, 4, 4]));
        let y = tape.conv_transpose2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 32, 32]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn independent_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.leaf(t(&[2], &[3.0, 4.0]));
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let loss = tape.sum(z).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert_eq!(tape.log(x).unwrap_err(), TensorError::NonFinite { op: "log" });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 500.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).data()[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[5., 6.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        let s = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[5., 6.]);
        assert!(tape.slice(c, 1, 2, 4).is_err());
    }
}
