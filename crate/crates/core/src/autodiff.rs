//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node whose parents already live on the tape, so
//! node indices form a topological order and the graph is acyclic by
//! construction. [`Graph::backward`] walks the tape in reverse, accumulating
//! (summing) gradient contributions when a node feeds several consumers.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Backward rule of a node, together with whatever the forward pass saved.
#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    /// Gradient passes to the parent unchanged, whatever the forward computed.
    StraightThrough(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor,
        targets: Tensor,
    },
    SigmoidBce {
        logits: Var,
        targets: Tensor,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Binary(_, a, b) => vec![a, b],
            Op::Unary(_, x)
            | Op::Clamp { x, .. }
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::StraightThrough(x) => vec![x],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::ChannelBias { x, b } => vec![x, b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::SoftmaxCrossEntropy { logits, .. } | Op::SigmoidBce { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds sample `n` of `x` into a `[C·kh·kw × Ho·Wo]` matrix.
    fn im2col(&self, x: &[f64], n: usize, cols: &mut [f64]) {
        let p = self.positions();
        let img = &x[n * self.c * self.h * self.w..(n + 1) * self.c * self.h * self.w];
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let out = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            out[oi * self.wo + oj] =
                                if ii >= 0 && jj >= 0 && (ii as usize) < self.h && (jj as usize) < self.w {
                                    img[(c * self.h + ii as usize) * self.w + jj as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters-adds columns back into sample `n`.
    fn col2im(&self, cols: &[f64], n: usize, dx: &mut [f64]) {
        let p = self.positions();
        let img = &mut dx[n * self.c * self.h * self.w..(n + 1) * self.c * self.h * self.w];
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj as usize >= self.w {
                                continue;
                            }
                            img[(c * self.h + ii as usize) * self.w + jj as usize] += src[oi * self.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Broadcast layout of a binary op: which operand (if any) is repeated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layout {
    Same,
    LhsRepeats,
    RhsRepeats,
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let start = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[start..]
}

/// Shapes broadcast when equal, or when the smaller one (leading 1s removed)
/// is a suffix of the larger one.
fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Layout)> {
    if a == b {
        return Ok((a.to_vec(), Layout::Same));
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let (big, small, layout) = if na >= nb { (a, b, Layout::RhsRepeats) } else { (b, a, Layout::LhsRepeats) };
    let core = strip_leading_ones(small);
    if core.len() <= big.len() && big.ends_with(core) {
        Ok((big.to_vec(), layout))
    } else {
        Err(Error::dim(format!("shapes {a:?} and {b:?} do not broadcast")))
    }
}

/// Sums `g` into a tensor of `numel` entries by folding repeats (index modulo).
fn fold_repeats(g: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for (i, v) in g.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(shape.to_vec(), out).expect("fold shape")
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, or `None` when backward never reached the node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient with the unreached case materialized as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// Short name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        match self.nodes[v.0].op {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Unary(Unary::Relu, _) => "relu",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::Exp, _) => "exp",
            Op::Unary(Unary::Log, _) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::StraightThrough(_) => "straight_through",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SigmoidBce { .. } => "sigmoid_bce",
        }
    }

    /// Every node on the tape, in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Every node whose parents include `v`.
    pub fn consumers(&self, v: Var) -> Vec<Var> {
        (v.0 + 1..self.nodes.len()).map(Var).filter(|&c| self.nodes[c.0].op.parents().contains(&v)).collect()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the dense-layer product with row-per-neuron weights.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims()?;
        let (n, k2) = self.value(b).matrix_dims()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_t inner dimensions differ: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (shape, _) = broadcast(self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (na, nb) = (av.len(), bv.len());
        let numel: usize = shape.iter().product();
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data = (0..numel).map(|i| f(av[i % na], bv[i % nb])).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Binary(kind, a, b)))
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

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = match kind {
            Unary::Relu => xv.map(|v| v.max(0.0)),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Exp => xv.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                xv.map(f64::ln)
            }
        };
        Ok(self.push(out, Op::Unary(kind, x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    /// Gradient flows where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::contract(format!("clamp bounds [{lo}, {hi}] are empty")));
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        Ok(self.push(out, Op::Clamp { x, lo, hi }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(out, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).rows();
        let rest = self.value(x).numel() / n;
        self.reshape(x, vec![n, rest])
    }

    /// Cross-correlation of `x[N×C×H×W]` with `w[F×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[n, c, h, wd], &[f, wc, kh, kw]) = (xs, ws) else {
            return Err(Error::dim(format!("conv2d expects 4-d input and kernel, got {xs:?} and {ws:?}")));
        };
        if c != wc {
            return Err(Error::dim(format!("conv2d channel mismatch: input {xs:?}, kernel {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d kernel {ws:?} larger than padded input {xs:?} (padding {padding})"
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let (patch, p) = (geom.patch(), geom.positions());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * f * p];
        let mut cols = vec![0.0; patch * p];
        for s in 0..n {
            geom.im2col(xv, s, &mut cols);
            gemm_nn(wv, &cols, &mut out[s * f * p..(s + 1) * f * p], f, patch, p);
        }
        let out = Tensor::new(vec![n, f, geom.ho, geom.wo], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom }))
    }

    /// Adds `b[C]` along axis 1 of `x[N×C×…]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(Error::dim(format!("channel bias {bs:?} does not match input {xs:?}")));
        }
        let c = xs[1];
        let inner = self.value(x).numel() / (xs[0] * c);
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[(i / inner) % c];
        }
        Ok(self.push(out, Op::ChannelBias { x, b }))
    }

    /// Node whose value is `forward(input)` and whose backward rule is the
    /// identity: the upstream gradient reaches `input` unchanged.
    pub fn custom_grad<F>(&mut self, input: Var, forward: F) -> Result<Var>
    where
        F: FnOnce(&Tensor) -> Result<Tensor>,
    {
        let out = forward(self.value(input))?;
        if out.shape() != self.shape(input) {
            return Err(Error::dim(format!(
                "custom_grad forward changed shape {:?} -> {:?}",
                self.shape(input),
                out.shape()
            )));
        }
        Ok(self.push(out, Op::StraightThrough(input)))
    }

    /// Batch normalization with batch statistics over every axis except 1.
    /// Returns the output node plus the per-channel batch mean and (biased) variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (c, inner) = self.bn_dims(x, gamma, beta)?;
        let n = self.shape(x)[0];
        if n < 2 {
            return Err(Error::contract(format!("batch norm in train mode needs N >= 2, got {n}")));
        }
        let xv = self.value(x).data();
        let count = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, v) in xv.iter().enumerate() {
            mean[(i / inner) % c] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, v) in xv.iter().enumerate() {
            let ch = (i / inner) % c;
            var[ch] += (v - mean[ch]).powi(2);
        }
        var.iter_mut().for_each(|s| *s /= count);
        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps, inner, true);
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (c, inner) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim(format!("running statistics do not have {c} channels")));
        }
        Ok(self.bn_apply(x, gamma, beta, mean, var, eps, inner, false))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::dim(format!("batch norm needs [N×C×…] input, got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batch norm affine parameters {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((c, self.value(x).numel() / (xs[0] * c)))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        inner: usize,
        batch_stats: bool,
    ) -> Var {
        let c = mean.len();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = self.value(x).clone();
        let mut out = self.value(x).clone();
        for (i, (h, o)) in xhat.data_mut().iter_mut().zip(out.data_mut()).enumerate() {
            let ch = (i / inner) % c;
            *h = (*h - mean[ch]) * inv_std[ch];
            *o = g[ch] * *h + b[ch];
        }
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats })
    }

    /// Mean over rows of `-Σ_c target·log softmax(logits)`; targets are soft labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (n, c) = self.value(logits).matrix_dims()?;
        if targets.shape() != [n, c] {
            return Err(Error::dim(format!(
                "targets {:?} do not match logits {:?}",
                targets.shape(),
                self.shape(logits)
            )));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let logp = row[j] - lse;
                probs[i * c + j] = logp.exp();
                let t = targets.data()[i * c + j];
                if t != 0.0 {
                    loss -= t * logp;
                }
            }
        }
        let probs = Tensor::new(vec![n, c], probs)?;
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(out, Op::SoftmaxCrossEntropy { logits, probs, targets: targets.clone() }))
    }

    /// Mean over all entries of the binary cross-entropy of `sigmoid(logits)`,
    /// in the overflow-free form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if targets.shape() != self.shape(logits) {
            return Err(Error::dim(format!(
                "targets {:?} do not match logits {:?}",
                targets.shape(),
                self.shape(logits)
            )));
        }
        let z = self.value(logits).data();
        let total: f64 =
            z.iter().zip(targets.data()).map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()).sum();
        let out = Tensor::scalar(total / z.len() as f64);
        Ok(self.push(out, Op::SigmoidBce { logits, targets: targets.clone() }))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), node.value.shape());
        match &mut node.grad {
            None => node.grad = Some(g),
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    /// Back-propagates from a scalar `loss`, accumulating into every reachable
    /// node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let seed = Tensor::ones(self.shape(loss).to_vec());
        self.accumulate(loss, seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            for (parent, contribution) in self.contributions(i, &g)? {
                self.accumulate(parent, contribution);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn contributions(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = av.matrix_dims()?;
                let n = bv.dim(1);
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    out.push((a, Tensor::new(vec![m, k], da)?));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut db, k, m, n);
                    out.push((b, Tensor::new(vec![k, n], db)?));
                }
            }
            &Op::MatMulT(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = av.matrix_dims()?;
                let n = bv.dim(0);
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g.data(), bv.data(), &mut da, m, n, k);
                    out.push((a, Tensor::new(vec![m, k], da)?));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g.data(), av.data(), &mut db, n, m, k);
                    out.push((b, Tensor::new(vec![n, k], db)?));
                }
            }
            &Op::Binary(kind, a, b) => {
                let (_, layout) = broadcast(self.shape(a), self.shape(b))?;
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let (na, nb) = (av.len(), bv.len());
                let full = |f: &dyn Fn(usize, f64) -> f64| -> Tensor {
                    let data = g.data().iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
                    Tensor::new(g.shape().to_vec(), data).expect("grad shape")
                };
                let ga = match kind {
                    Binary::Add | Binary::Sub => g.clone(),
                    Binary::Mul => full(&|i, gi| gi * bv[i % nb]),
                };
                let gb = match kind {
                    Binary::Add => g.clone(),
                    Binary::Sub => g.map(|v| -v),
                    Binary::Mul => full(&|i, gi| gi * av[i % na]),
                };
                let fold = |t: Tensor, v: Var, repeats: bool| {
                    if repeats {
                        fold_repeats(&t, self.shape(v))
                    } else {
                        t
                    }
                };
                if self.wants(a) {
                    out.push((a, fold(ga, a, layout == Layout::LhsRepeats)));
                }
                if self.wants(b) {
                    out.push((b, fold(gb, b, layout == Layout::RhsRepeats)));
                }
            }
            &Op::Unary(kind, x) => {
                let xv = self.value(x).data();
                let yv = node.value.data();
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| match kind {
                        Unary::Relu => {
                            if xv[i] > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => gi * yv[i] * (1.0 - yv[i]),
                        Unary::Exp => gi * yv[i],
                        Unary::Log => gi / xv[i],
                    })
                    .collect();
                out.push((x, Tensor::new(g.shape().to_vec(), data)?));
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = self.value(x).data();
                let data = g.data().iter().zip(xv).map(|(&gi, &v)| if v >= lo && v <= hi { gi } else { 0.0 }).collect();
                out.push((x, Tensor::new(g.shape().to_vec(), data)?));
            }
            &Op::Scale(x, f) => out.push((x, g.map(|v| v * f))),
            &Op::Sum(x) => out.push((x, Tensor::full(self.shape(x).to_vec(), g.item()))),
            &Op::Mean(x) => {
                let n = self.value(x).numel() as f64;
                out.push((x, Tensor::full(self.shape(x).to_vec(), g.item() / n)));
            }
            &Op::Reshape(x) => out.push((x, g.clone().reshape(self.shape(x).to_vec())?)),
            &Op::StraightThrough(x) => out.push((x, g.clone())),
            &Op::Conv2d { x, w, geom } => {
                let (patch, p, f) = (geom.patch(), geom.positions(), geom.f);
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut dw = vec![0.0; f * patch];
                let mut dx = vec![0.0; xv.len()];
                let mut cols = vec![0.0; patch * p];
                let mut dcols = vec![0.0; patch * p];
                for s in 0..geom.n {
                    let gs = &g.data()[s * f * p..(s + 1) * f * p];
                    if self.wants(w) {
                        geom.im2col(xv, s, &mut cols);
                        gemm_nt(gs, &cols, &mut dw, f, p, patch);
                    }
                    if self.wants(x) {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn(wv, gs, &mut dcols, patch, f, p);
                        geom.col2im(&dcols, s, &mut dx);
                    }
                }
                if self.wants(x) {
                    out.push((x, Tensor::new(self.shape(x).to_vec(), dx)?));
                }
                if self.wants(w) {
                    out.push((w, Tensor::new(self.shape(w).to_vec(), dw)?));
                }
            }
            &Op::ChannelBias { x, b } => {
                out.push((x, g.clone()));
                if self.wants(b) {
                    let xs = self.shape(x);
                    let c = xs[1];
                    let inner = g.numel() / (xs[0] * c);
                    let mut db = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        db[(i / inner) % c] += v;
                    }
                    out.push((b, Tensor::vector(db)));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xs = self.shape(x);
                let c = xs[1];
                let inner = g.numel() / (xs[0] * c);
                let gam = self.value(gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (&gi, &h)) in g.data().iter().zip(xhat.data()).enumerate() {
                    let ch = (i / inner) % c;
                    dgamma[ch] += gi * h;
                    dbeta[ch] += gi;
                }
                if self.wants(x) {
                    let dx: Vec<f64> = if *batch_stats {
                        let count = (xs[0] * inner) as f64;
                        g.data()
                            .iter()
                            .zip(xhat.data())
                            .enumerate()
                            .map(|(i, (&gi, &h))| {
                                let ch = (i / inner) % c;
                                gam[ch] * inv_std[ch] / count * (count * gi - dbeta[ch] - h * dgamma[ch])
                            })
                            .collect()
                    } else {
                        g.data()
                            .iter()
                            .enumerate()
                            .map(|(i, &gi)| {
                                let ch = (i / inner) % c;
                                gi * gam[ch] * inv_std[ch]
                            })
                            .collect()
                    };
                    out.push((x, Tensor::new(xs.to_vec(), dx)?));
                }
                out.push((gamma, Tensor::vector(dgamma)));
                out.push((beta, Tensor::vector(dbeta)));
            }
            Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                let (n, c) = probs.matrix_dims()?;
                let scale = g.item() / n as f64;
                let mut d = vec![0.0; n * c];
                for i in 0..n {
                    let trow = targets.row(i);
                    let mass: f64 = trow.iter().sum();
                    for j in 0..c {
                        d[i * c + j] = scale * (probs.data()[i * c + j] * mass - trow[j]);
                    }
                }
                out.push((*logits, Tensor::new(vec![n, c], d)?));
            }
            Op::SigmoidBce { logits, targets } => {
                let z = self.value(*logits);
                let scale = g.item() / z.numel() as f64;
                let d = z.data().iter().zip(targets.data()).map(|(&z, &y)| scale * (sigmoid(z) - y)).collect();
                out.push((*logits, Tensor::new(z.shape().to_vec(), d)?));
            }
        }
        Ok(out)
    }
}
