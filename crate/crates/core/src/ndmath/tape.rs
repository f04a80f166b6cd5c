//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. Nodes only refer
//! to earlier nodes, so the tape is already in topological order and
//! `backward` is a single reverse sweep.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Square(Var),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    LogSumExpRows(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
    Conv2d(Var, Var, Var),
    MaxPool2d(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>),
    IndexSelect(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    WithValue(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Relu(..) => "relu",
            Op::Clamp(..) => "clamp",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LogSumExp(..) => "logsumexp",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::Conv2d(..) => "conv2d",
            Op::MaxPool2d(..) => "max_pool2d",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::IndexSelect(..) => "index_select",
            Op::GatherRows(..) => "gather_rows",
            Op::WithValue(..) => "with_value",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation. Single-threaded; build one per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar loss with respect to every recorded value.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

/// `op(A) @ op(B)` with `A: [m, k]` and `B: [k, n]` after optional transposes.
/// Accumulates each output row in `f64`, iterating `k` in order.
fn gemm<T: Scalar>(a: &[T], ta: bool, b: &[T], tb: bool, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = if ta { a[p * m + i] } else { a[i * k + p] }.to_f64_lossless();
            if aip == 0.0 {
                continue;
            }
            if tb {
                for (j, slot) in acc.iter_mut().enumerate() {
                    *slot += aip * b[j * k + p].to_f64_lossless();
                }
            } else {
                let row = &b[p * n..(p + 1) * n];
                for (slot, &bv) in acc.iter_mut().zip(row) {
                    *slot += aip * bv.to_f64_lossless();
                }
            }
        }
        out.extend(acc.iter().map(|&v| T::from_f64_lossy(v)));
    }
    out
}

fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp_f64(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let mut acc = 0.0;
    for v in values {
        acc += (v - max).exp();
    }
    max + acc.ln()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} output", op.name())));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", av)?;
        let (k2, n) = dims2("matmul", bv)?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let data = gemm(av.data(), false, bv.data(), false, m, k, n);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = dims2("transpose", av)?;
        let src = av.data();
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                data.push(src[i * n + j]);
            }
        }
        self.push(Tensor::new(vec![n, m], data)?, Op::Transpose(a))
    }

    fn zip_with(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op.name(), av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// `x[i, j] + bias[j]` for `x: [m, n]`, `bias: [n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, n) = dims2("add_bias", xv)?;
        if bv.shape() != [n] {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddBias(x, bias))
    }

    fn unary(&mut self, op: Op<T>, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(Op::Scale(a, c), a, |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(Op::AddScalar(a), a, |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp(a), a, |x| x.exp())
    }

    /// Natural log; non-positive inputs are rejected.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::NonFinite("log of non-positive input".into()));
        }
        self.unary(Op::Log(a), a, |x| x.ln())
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Softplus(a), a, |x| {
            T::from_f64_lossy(softplus_f64(x.to_f64_lossless()))
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu(a), a, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid("clamp", format!("lower bound {lo} exceeds upper bound {hi}")));
        }
        self.unary(Op::Clamp(a, lo, hi), a, |x| x.max(lo).min(hi))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_f64();
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.sum_f64() / av.numel() as f64;
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Mean(a))
    }

    /// `ln Σ e^x` over all elements.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let v = log_sum_exp_f64(av.data().iter().map(|x| x.to_f64_lossless()));
        self.push(Tensor::scalar(T::from_f64_lossy(v)), Op::LogSumExp(a))
    }

    /// Row-wise `ln Σ_j e^{x_ij}` for `x: [m, n]`, giving `[m]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = dims2("logsumexp_rows", av)?;
        let data = av
            .data()
            .chunks(n)
            .map(|row| T::from_f64_lossy(log_sum_exp_f64(row.iter().map(|x| x.to_f64_lossless()))))
            .collect();
        self.push(Tensor::new(vec![m], data)?, Op::LogSumExpRows(a))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = dims2("softmax_cross_entropy", lv)?;
        if labels.len() != b {
            return Err(Error::shape("softmax_cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid("labels", format!("label {bad} outside [0, {c})")));
        }
        let mut acc = 0.0f64;
        for (row, &label) in lv.data().chunks(c).zip(labels) {
            let lse = log_sum_exp_f64(row.iter().map(|x| x.to_f64_lossless()));
            acc += lse - row[label].to_f64_lossless();
        }
        let out = Tensor::scalar(T::from_f64_lossy(acc / b as f64));
        self.push(out, Op::SoftmaxCrossEntropy(logits, labels.to_vec()))
    }

    /// Valid-padding, stride-1 convolution.
    /// `x: [B, C, H, W]`, `w: [O, C, KH, KW]`, `bias: [O]` → `[B, O, H-KH+1, W-KW+1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        let (&[bs, c, h, wd], &[o, c2, kh, kw]) = (xv.shape(), wv.shape()) else {
            return Err(Error::shape("conv2d", xv.shape(), wv.shape()));
        };
        if c != c2 || kh > h || kw > wd {
            return Err(Error::shape("conv2d", xv.shape(), wv.shape()));
        }
        if bv.shape() != [o] {
            return Err(Error::shape("conv2d", wv.shape(), bv.shape()));
        }
        let (oh, ow) = conv_output_size(h, wd, kh, kw);
        let (xd, wdt, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = Vec::with_capacity(bs * o * oh * ow);
        for n in 0..bs {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bd[oc].to_f64_lossless();
                        for ic in 0..c {
                            for ki in 0..kh {
                                let xrow = ((n * c + ic) * h + i + ki) * wd + j;
                                let wrow = ((oc * c + ic) * kh + ki) * kw;
                                for kj in 0..kw {
                                    acc += xd[xrow + kj].to_f64_lossless()
                                        * wdt[wrow + kj].to_f64_lossless();
                                }
                            }
                        }
                        out.push(T::from_f64_lossy(acc));
                    }
                }
            }
        }
        self.push(Tensor::new(vec![bs, o, oh, ow], out)?, Op::Conv2d(x, w, bias))
    }

    /// Max pooling over `kernel × kernel` windows with the given stride;
    /// the first maximal element of a window receives the gradient.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let &[bs, c, h, w] = xv.shape() else {
            return Err(Error::shape("max_pool2d", xv.shape(), &[0, 0, 0, 0]));
        };
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::invalid("max_pool2d", format!("kernel {kernel} stride {stride} on {h}x{w}")));
        }
        let (oh, ow) = pool_output_size(h, w, kernel, stride);
        let xd = xv.data();
        let mut out = Vec::with_capacity(bs * c * oh * ow);
        let mut argmax = Vec::with_capacity(bs * c * oh * ow);
        for plane in 0..bs * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = base + (i * stride + ki) * w + j * stride + kj;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Tensor::new(vec![bs, c, oh, ow], out)?, Op::MaxPool2d(x, argmax))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let shape = pv.shape();
            if shape.is_empty() || shape[1..] != tail[..] {
                return Err(Error::shape("concat", self.value(*first).shape(), shape));
            }
            lead += shape[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()))
    }

    /// Gathers elements by flat index into a 1-D tensor.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.numel()) {
            return Err(Error::invalid("index_select", format!("index {bad} out of {} elements", av.numel())));
        }
        let data = indices.iter().map(|&i| av.data()[i]).collect();
        let out = Tensor::new(vec![indices.len()], data)?;
        self.push(out, Op::IndexSelect(a, indices.to_vec()))
    }

    /// Row lookup `table[rows[i], :]` for `table: [V, d]`, giving `[len, d]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = dims2("gather_rows", tv)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of {v}")));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(tv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        self.push(out, Op::GatherRows(table, rows.to_vec()))
    }

    /// Node carrying the value of `value_src` whose gradient flows only into
    /// `grad_src`. Both must share a shape.
    pub fn with_value(&mut self, grad_src: Var, value_src: Var) -> Result<Var> {
        let (gv, vv) = (self.value(grad_src), self.value(value_src));
        same_shape("with_value", gv, vv)?;
        let out = vv.clone();
        self.push(out, Op::WithValue(grad_src))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let ga = gemm(g.data(), false, bv.data(), true, m, n, k);
                    let gb = gemm(av.data(), true, g.data(), false, k, m, n);
                    accumulate(&mut grads, *a, av.shape(), ga);
                    accumulate(&mut grads, *b, bv.shape(), gb);
                }
                Op::Transpose(a) => {
                    let (m, n) = (out.shape()[1], out.shape()[0]);
                    let gd = g.data();
                    let mut ga = Vec::with_capacity(m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga.push(gd[j * m + i]);
                        }
                    }
                    accumulate(&mut grads, *a, &[m, n], ga);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec());
                    accumulate(&mut grads, *b, g.shape(), g.data().to_vec());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec());
                    accumulate(&mut grads, *b, g.shape(), g.data().iter().map(|&v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.data().iter().zip(bv.data()).map(|(&gv, &y)| gv * y).collect();
                    let gb = g.data().iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                    accumulate(&mut grads, *b, bv.shape(), gb);
                }
                Op::AddBias(x, bias) => {
                    let n = g.shape()[1];
                    let mut gb = vec![0.0f64; n];
                    for row in g.data().chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v.to_f64_lossless();
                        }
                    }
                    accumulate(&mut grads, *x, g.shape(), g.data().to_vec());
                    accumulate(&mut grads, *bias, &[n], gb.into_iter().map(T::from_f64_lossy).collect());
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().iter().map(|&v| v * *c).collect());
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, &shape, g.data().to_vec());
                }
                Op::Exp(a) => {
                    let ga = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                    accumulate(&mut grads, *a, out.shape(), ga);
                }
                Op::Log(a) => {
                    let av = self.value(*a);
                    let ga = g.data().iter().zip(av.data()).map(|(&gv, &x)| gv / x).collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::Softplus(a) => {
                    let av = self.value(*a);
                    let ga = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gv, &x)| gv * T::from_f64_lossy(sigmoid_f64(x.to_f64_lossless())))
                        .collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let ga = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let av = self.value(*a);
                    let ga = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gv, &x)| if x >= *lo && x <= *hi { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::Square(a) => {
                    let av = self.value(*a);
                    let two = T::one() + T::one();
                    let ga = g.data().iter().zip(av.data()).map(|(&gv, &x)| two * gv * x).collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, av.shape(), vec![gv; av.numel()]);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let gv = T::from_f64_lossy(g.data()[0].to_f64_lossless() / av.numel() as f64);
                    accumulate(&mut grads, *a, av.shape(), vec![gv; av.numel()]);
                }
                Op::LogSumExp(a) => {
                    let av = self.value(*a);
                    let lse = out.data()[0].to_f64_lossless();
                    let gv = g.data()[0].to_f64_lossless();
                    let ga = av
                        .data()
                        .iter()
                        .map(|&x| T::from_f64_lossy(gv * (x.to_f64_lossless() - lse).exp()))
                        .collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::LogSumExpRows(a) => {
                    let av = self.value(*a);
                    let n = av.shape()[1];
                    let mut ga = Vec::with_capacity(av.numel());
                    for ((row, &lse), &gv) in av.data().chunks(n).zip(out.data()).zip(g.data()) {
                        let (lse, gv) = (lse.to_f64_lossless(), gv.to_f64_lossless());
                        ga.extend(
                            row.iter()
                                .map(|&x| T::from_f64_lossy(gv * (x.to_f64_lossless() - lse).exp())),
                        );
                    }
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::SoftmaxCrossEntropy(logits, labels) => {
                    let lv = self.value(*logits);
                    let (b, c) = (lv.shape()[0], lv.shape()[1]);
                    let scale = g.data()[0].to_f64_lossless() / b as f64;
                    let mut ga = Vec::with_capacity(b * c);
                    for (row, &label) in lv.data().chunks(c).zip(labels) {
                        let lse = log_sum_exp_f64(row.iter().map(|x| x.to_f64_lossless()));
                        for (j, &x) in row.iter().enumerate() {
                            let p = (x.to_f64_lossless() - lse).exp();
                            let target = if j == label { 1.0 } else { 0.0 };
                            ga.push(T::from_f64_lossy(scale * (p - target)));
                        }
                    }
                    accumulate(&mut grads, *logits, lv.shape(), ga);
                }
                Op::Conv2d(x, w, bias) => {
                    let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, self.value(*x).shape(), gx);
                    accumulate(&mut grads, *w, self.value(*w).shape(), gw);
                    accumulate(&mut grads, *bias, self.value(*bias).shape(), gb);
                }
                Op::MaxPool2d(x, argmax) => {
                    let xv = self.value(*x);
                    let mut gx = vec![T::zero(); xv.numel()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        gx[src] += gv;
                    }
                    accumulate(&mut grads, *x, xv.shape(), gx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let len = pv.numel();
                        accumulate(&mut grads, p, pv.shape(), g.data()[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::IndexSelect(a, indices) => {
                    let av = self.value(*a);
                    let mut ga = vec![T::zero(); av.numel()];
                    for (&i, &gv) in indices.iter().zip(g.data()) {
                        ga[i] += gv;
                    }
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::GatherRows(table, rows) => {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let mut ga = vec![T::zero(); tv.numel()];
                    for (&r, grow) in rows.iter().zip(g.data().chunks(d)) {
                        for (slot, &gv) in ga[r * d..(r + 1) * d].iter_mut().zip(grow) {
                            *slot += gv;
                        }
                    }
                    accumulate(&mut grads, *table, tv.shape(), ga);
                }
                Op::WithValue(src) => {
                    accumulate(&mut grads, *src, g.shape(), g.data().to_vec());
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape matches value"));
        }
    }
}

fn conv2d_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let &[bs, c, h, wd] = x.shape() else { unreachable!() };
    let &[o, _, kh, kw] = w.shape() else { unreachable!() };
    let (oh, ow) = conv_output_size(h, wd, kh, kw);
    let (xd, wdt, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0f64; xd.len()];
    let mut gw = vec![0.0f64; wdt.len()];
    let mut gb = vec![0.0f64; o];
    for n in 0..bs {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let gv = gd[((n * o + oc) * oh + i) * ow + j].to_f64_lossless();
                    if gv == 0.0 {
                        continue;
                    }
                    gb[oc] += gv;
                    for ic in 0..c {
                        for ki in 0..kh {
                            let xrow = ((n * c + ic) * h + i + ki) * wd + j;
                            let wrow = ((oc * c + ic) * kh + ki) * kw;
                            for kj in 0..kw {
                                gw[wrow + kj] += gv * xd[xrow + kj].to_f64_lossless();
                                gx[xrow + kj] += gv * wdt[wrow + kj].to_f64_lossless();
                            }
                        }
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect();
    (cast(gx), cast(gw), cast(gb))
}

/// Spatial output size of a valid, stride-1 convolution.
pub fn conv_output_size(h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
    (h - kh + 1, w - kw + 1)
}

/// Spatial output size of a pooling window with the given stride.
pub fn pool_output_size(h: usize, w: usize, kernel: usize, stride: usize) -> (usize, usize) {
    ((h - kernel) / stride + 1, (w - kernel) / stride + 1)
}
