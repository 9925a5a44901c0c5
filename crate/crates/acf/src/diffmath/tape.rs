//! Tape-based reverse-mode differentiation. A fresh tape is recorded for every
//! optimization step; nodes are append-only so creation order is a topological
//! order of the graph.

use std::sync::Arc;

use super::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bcast {
    /// identical shapes
    Same,
    /// b is `[C]` or `[1, C]`, applied to every row of a `[R, C]`
    Row,
    /// b is `[R, 1]`, applied to every column of a `[R, C]`
    Col,
    /// b is a single value
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    /// Input node. Named leaves are parameters; unnamed ones are constants.
    Leaf { name: Option<String> },
    StopGrad(Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Scale(Var, f32),
    Bin(BinKind, Var, Var, Bcast),
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Sum(Var),
    Mean(Var),
    LogSumExpRows(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows { x: Var, start: usize, len: usize },
    TakeRows { x: Var, idx: Arc<Vec<usize>> },
    GatherCols { x: Var, idx: Arc<Vec<usize>> },
    Diag(Var),
    Reshape(Var),
    RmsNormRows { x: Var, gain: Var, eps: f32 },
    Conv2dNhwc { x: Var, w: Var, b: Option<Var>, kh: usize, kw: usize, stride: usize, pad: usize },
    PairEnergy { z: Var, zk: Var, w1: Var, b1: Var, w2: Var, b2: Var },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
    /// Saved intermediates for the backward pass (im2col columns, hidden activations).
    pub aux: Vec<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of all named leaves, keyed by parameter name.
    pub fn named(&self, tape: &Tape) -> std::collections::BTreeMap<String, Tensor> {
        let mut out = std::collections::BTreeMap::new();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(n) } = &node.op {
                if let Some(g) = &self.grads[i] {
                    out.insert(n.clone(), g.clone());
                }
            }
        }
        out
    }
}

// ── numeric helpers ──────────────────────────────────────────────────

#[inline]
pub(crate) fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn log_sigmoid_f32(x: f32) -> f32 {
    // log sigma(x) = min(x, 0) - ln(1 + e^{-|x|})
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn silu_f32(x: f32) -> f32 {
    x * sigmoid_f32(x)
}

#[inline]
pub(crate) fn silu_grad_f32(x: f32) -> f32 {
    let s = sigmoid_f32(x);
    s * (1.0 + x * (1.0 - s))
}

/// C (m x n) = op_a(A) * op_b(B) with optional logical transposes; row-major storage.
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
) {
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn bcast_kind(a: &Tensor, b: &Tensor, what: &str) -> Bcast {
    if a.shape() == b.shape() {
        return Bcast::Same;
    }
    if b.is_scalar() {
        return Bcast::Scalar;
    }
    let (r, c) = (a.rows(), a.cols());
    let bs = b.shape();
    if (bs.len() == 1 && bs[0] == c) || (bs.len() == 2 && bs[0] == 1 && bs[1] == c) {
        return Bcast::Row;
    }
    if bs.len() == 2 && bs[0] == r && bs[1] == 1 && a.shape().len() == 2 {
        return Bcast::Col;
    }
    panic!("shape mismatch for {what}: {:?} vs {:?}", a.shape(), b.shape());
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, aux: Vec<Tensor>) -> Var {
        self.nodes.push(Node { value, op, needs_grad, aux });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { name: None }, false, vec![])
    }

    /// Named parameter leaf; participates in backward.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.push(t, Op::Leaf { name: Some(name.to_string()) }, true, vec![])
    }

    /// Forward identity whose gradient contribution is exactly zero.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGrad(x), false, vec![])
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let xv = self.value(x);
        let data: Vec<f32> = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        let needs = self.ng(x);
        self.push(t, op, needs, vec![])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), silu_f32)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f32::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid_f32)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f32::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f32::ln)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::LogSigmoid(x), log_sigmoid_f32)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Var {
        let what = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let bc = bcast_kind(self.value(a), self.value(b), what);
        let av = self.value(a);
        let bv = self.value(b);
        let (rows, cols) = (av.rows(), av.cols());
        let ad = av.data();
        let bd = bv.data();
        let f = |x: f32, y: f32| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let data: Vec<f32> = match bc {
            Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
            Bcast::Row => {
                let mut out = Vec::with_capacity(ad.len());
                for r in 0..rows {
                    for c in 0..cols {
                        out.push(f(ad[r * cols + c], bd[c]));
                    }
                }
                out
            }
            Bcast::Col => {
                let mut out = Vec::with_capacity(ad.len());
                for r in 0..rows {
                    for c in 0..cols {
                        out.push(f(ad[r * cols + c], bd[r]));
                    }
                }
                out
            }
        };
        let t = Tensor::new(av.shape().to_vec(), data);
        let needs = self.ng(a) || self.ng(b);
        self.push(t, Op::Bin(kind, a, b, bc), needs, vec![])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// Matrix product with optional logical transposes of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(
            av.shape().len() == 2 && bv.shape().len() == 2,
            "matmul wants rank-2 operands, got {:?} and {:?}",
            av.shape(),
            bv.shape()
        );
        let (am, ak) = if ta { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
        let (bk, bn) = if tb { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        assert_eq!(
            ak,
            bk,
            "shape mismatch for matmul: {:?}{} x {:?}{}",
            av.shape(),
            if ta { "^T" } else { "" },
            bv.shape(),
            if tb { "^T" } else { "" }
        );
        let mut out = vec![0.0f32; am * bn];
        sgemm(am, ak, bn, av.data(), ta, bv.data(), tb, &mut out);
        let t = Tensor::new(vec![am, bn], out);
        let needs = self.ng(a) || self.ng(b);
        self.push(t, Op::MatMul { a, ta, b, tb }, needs, vec![])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs, vec![])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f32 = xv.data().iter().sum();
        let m = s / xv.len() as f32;
        let needs = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs, vec![])
    }

    /// Row-wise log(sum(exp(x))) of a `[R, C]` matrix, returned as `[R, 1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert!(cols > 0, "logsumexp over empty rows");
        let xd = xv.data();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let s: f32 = row.iter().map(|&v| (v - m).exp()).sum();
            out.push(m + s.ln());
        }
        let t = Tensor::new(vec![rows, 1], out);
        let needs = self.ng(x);
        self.push(t, Op::LogSumExpRows(x), needs, vec![])
    }

    /// Row-wise softmax of a `[R, C]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let xd = xv.data();
        let mut out = Vec::with_capacity(xd.len());
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0f32;
            let start = out.len();
            for &v in row {
                let e = (v - m).exp();
                out.push(e);
                s += e;
            }
            for v in &mut out[start..] {
                *v /= s;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out);
        let needs = self.ng(x);
        self.push(t, Op::SoftmaxRows(x), needs, vec![])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(
            av.rows(),
            bv.rows(),
            "shape mismatch for concat_cols: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let (rows, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(vec![rows, ca + cb], out);
        let needs = self.ng(a) || self.ng(b);
        self.push(t, Op::ConcatCols(a, b), needs, vec![])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(
            av.cols(),
            bv.cols(),
            "shape mismatch for concat_rows: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let cols = av.cols();
        let rows = av.rows() + bv.rows();
        let mut out = Vec::with_capacity(rows * cols);
        out.extend_from_slice(av.data());
        out.extend_from_slice(bv.data());
        let t = Tensor::new(vec![rows, cols], out);
        let needs = self.ng(a) || self.ng(b);
        self.push(t, Op::ConcatRows(a, b), needs, vec![])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert!(start + len <= rows, "slice_rows {start}+{len} out of {rows}");
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::new(vec![len, cols], data);
        let needs = self.ng(x);
        self.push(t, Op::SliceRows { x, start, len }, needs, vec![])
    }

    /// Gather whole rows by index.
    pub fn take_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < rows, "take_rows index {i} out of {rows}");
            out.extend_from_slice(&xv.data()[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![idx.len(), cols], out);
        let needs = self.ng(x);
        self.push(t, Op::TakeRows { x, idx: Arc::new(idx.to_vec()) }, needs, vec![])
    }

    /// Pick one column per row: out[r] = x[r, idx[r]], returned as `[R, 1]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert_eq!(idx.len(), rows, "gather_cols wants one index per row");
        let mut out = Vec::with_capacity(rows);
        for (r, &c) in idx.iter().enumerate() {
            assert!(c < cols, "gather_cols column {c} out of {cols}");
            out.push(xv.data()[r * cols + c]);
        }
        let t = Tensor::new(vec![rows, 1], out);
        let needs = self.ng(x);
        self.push(t, Op::GatherCols { x, idx: Arc::new(idx.to_vec()) }, needs, vec![])
    }

    /// Diagonal of a square matrix as `[R, 1]`.
    pub fn diag(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert_eq!(rows, cols, "diag wants a square matrix, got {:?}", xv.shape());
        let out: Vec<f32> = (0..rows).map(|r| xv.data()[r * cols + r]).collect();
        let t = Tensor::new(vec![rows, 1], out);
        let needs = self.ng(x);
        self.push(t, Op::Diag(x), needs, vec![])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x).reshaped(shape);
        let needs = self.ng(x);
        self.push(t, Op::Reshape(x), needs, vec![])
    }

    /// RMS normalization over the trailing dimension with a learnable gain.
    pub fn rms_norm_rows(&mut self, x: Var, gain: Var, eps: f32) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert_eq!(
            gv.len(),
            cols,
            "shape mismatch for rms_norm: {:?} with gain {:?}",
            xv.shape(),
            gv.shape()
        );
        let xd = xv.data();
        let gd = gv.data();
        let mut out = Vec::with_capacity(xd.len());
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|&v| v * v).sum::<f32>() / cols as f32;
            let inv = 1.0 / (ms + eps).sqrt();
            for (c, &v) in row.iter().enumerate() {
                out.push(v * inv * gd[c]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out);
        let needs = self.ng(x) || self.ng(gain);
        self.push(t, Op::RmsNormRows { x, gain, eps }, needs, vec![])
    }
}

// ── convolution ──────────────────────────────────────────────────────

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Build im2col columns for NHWC input: out is [B*OH*OW, kh*kw*C].
fn im2col(
    x: &[f32],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let patch = kh * kw * c;
    let mut cols = vec![0.0f32; b * oh * ow * patch];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * patch;
                for ky in 0..kh {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * kw + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of im2col columns back into the NHWC input gradient.
fn col2im(
    cols: &[f32],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let patch = kh * kw * c;
    let mut x = vec![0.0f32; b * h * w * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * patch;
                for ky in 0..kh {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * kw + kx) * c;
                        for t in 0..c {
                            x[dst + t] += cols[src + t];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    /// 2-D convolution over NHWC input `[B, H, W, C]` with kernel stored as
    /// `[kh*kw*C, outC]`. Only the shapes the encoder uses are exercised
    /// (3x3 stride 2 pad 1, and 1x1 stride 1).
    pub fn conv2d_nhwc(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let xs = xv.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv input wants [B,H,W,C], got {:?}", xs);
        let (b, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(
            wv.rows(),
            kh * kw * c,
            "shape mismatch for conv kernel: {:?} vs input {:?} with {}x{} window",
            wv.shape(),
            xs,
            kh,
            kw
        );
        let out_c = wv.cols();
        let oh = conv_out(h, kh, stride, pad);
        let ow = conv_out(wd, kw, stride, pad);

        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let cols_t = if pointwise {
            xv.reshaped(vec![b * h * wd, c])
        } else {
            Tensor::new(vec![b * oh * ow, kh * kw * c], im2col(xv.data(), b, h, wd, c, kh, kw, stride, pad))
        };

        let rows = b * oh * ow;
        let mut out = vec![0.0f32; rows * out_c];
        sgemm(rows, kh * kw * c, out_c, cols_t.data(), false, wv.data(), false, &mut out);
        if let Some(bv) = bias {
            let bd = self.value(bv).data().to_vec();
            assert_eq!(bd.len(), out_c, "conv bias len {} vs outC {}", bd.len(), out_c);
            for r in 0..rows {
                for (j, &bj) in bd.iter().enumerate() {
                    out[r * out_c + j] += bj;
                }
            }
        }
        let t = Tensor::new(vec![b, oh, ow, out_c], out);
        let needs = self.ng(x) || self.ng(w) || bias.map(|v| self.ng(v)).unwrap_or(false);
        let aux = if pointwise { vec![] } else { vec![cols_t] };
        self.push(t, Op::Conv2dNhwc { x, w, b: bias, kh, kw, stride, pad }, needs, aux)
    }

    /// Fused per-factor energy head over all (i, j) batch pairs.
    ///
    /// Inputs: z `[B, d]`, zk `[B, 1]` (one component of the next latents),
    /// w1 `[d+1, H]`, b1 `[H]`, w2 `[H, A]`, b2 `[A]`. Output `[B*B, A]` where
    /// row i*B+j holds the head applied to (z_i, zk_j):
    /// `silu([z_i ; zk_j] * w1 + b1) * w2 + b2`.
    pub fn pair_energy(&mut self, z: Var, zk: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
        let zv = self.value(z);
        let zkv = self.value(zk);
        let w1v = self.value(w1);
        let b1v = self.value(b1);
        let w2v = self.value(w2);
        let b2v = self.value(b2);
        let (bsz, d) = (zv.rows(), zv.cols());
        assert_eq!(zkv.rows(), bsz, "pair_energy zk rows {} vs z rows {}", zkv.rows(), bsz);
        assert_eq!(zkv.cols(), 1, "pair_energy zk wants [B,1], got {:?}", zkv.shape());
        assert_eq!(
            w1v.rows(),
            d + 1,
            "shape mismatch for pair_energy w1: {:?} vs z {:?}",
            w1v.shape(),
            zv.shape()
        );
        let hid = w1v.cols();
        assert_eq!(b1v.len(), hid);
        assert_eq!(w2v.rows(), hid);
        let na = w2v.cols();
        assert_eq!(b2v.len(), na);

        // a_rows[i] = z_i . w1[0..d] + b1 ; bv_rows[j] = zk_j * w1[d]
        let mut a_rows = vec![0.0f32; bsz * hid];
        sgemm(bsz, d, hid, zv.data(), false, &w1v.data()[..d * hid], false, &mut a_rows);
        for r in 0..bsz {
            for hcol in 0..hid {
                a_rows[r * hid + hcol] += b1v.data()[hcol];
            }
        }
        let w1_last = &w1v.data()[d * hid..];
        let mut bv_rows = vec![0.0f32; bsz * hid];
        for j in 0..bsz {
            let zkj = zkv.data()[j];
            for hcol in 0..hid {
                bv_rows[j * hid + hcol] = zkj * w1_last[hcol];
            }
        }

        // hidden activations for all B*B pairs, then one wide matmul
        let mut s = vec![0.0f32; bsz * bsz * hid];
        for i in 0..bsz {
            let arow = &a_rows[i * hid..(i + 1) * hid];
            for j in 0..bsz {
                let brow = &bv_rows[j * hid..(j + 1) * hid];
                let dst = &mut s[(i * bsz + j) * hid..(i * bsz + j + 1) * hid];
                for hcol in 0..hid {
                    dst[hcol] = silu_f32(arow[hcol] + brow[hcol]);
                }
            }
        }
        let mut out = vec![0.0f32; bsz * bsz * na];
        sgemm(bsz * bsz, hid, na, &s, false, w2v.data(), false, &mut out);
        for r in 0..bsz * bsz {
            for (j, &bj) in b2v.data().iter().enumerate() {
                out[r * na + j] += bj;
            }
        }
        let t = Tensor::new(vec![bsz * bsz, na], out);
        let needs = self.ng(z) || self.ng(zk) || self.ng(w1) || self.ng(b1) || self.ng(w2) || self.ng(b2);
        let aux = vec![
            Tensor::new(vec![bsz, hid], a_rows),
            Tensor::new(vec![bsz, hid], bv_rows),
            Tensor::new(vec![bsz * bsz, hid], s),
        ];
        self.push(t, Op::PairEnergy { z, zk, w1, b1, w2, b2 }, needs, aux)
    }
}

// ── backward ─────────────────────────────────────────────────────────

impl Tape {
    /// Reverse-mode gradients of a scalar loss with respect to every node
    /// that requires gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let lt = &self.nodes[loss.0].value;
        assert!(
            lt.is_scalar(),
            "backward rejected: loss must be scalar, got shape {:?}",
            lt.shape()
        );
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.accumulate_inputs(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|v| Tensor::new(self.nodes[i].value.shape().to_vec(), v)))
            .collect();
        Gradients { grads: out }
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f32>>], v: Var, contrib: &[f32]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => grads[v.0] = Some(contrib.to_vec()),
        }
    }

    fn accumulate_inputs(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let val = &node.value;
        match &node.op {
            Op::Leaf { .. } | Op::StopGrad(_) => {}
            Op::Silu(x) => {
                let xd = self.nodes[x.0].value.data();
                let contrib: Vec<f32> =
                    xd.iter().zip(g).map(|(&v, &gv)| gv * silu_grad_f32(v)).collect();
                self.add_grad(grads, *x, &contrib);
            }
            Op::Tanh(x) => {
                let yd = val.data();
                let contrib: Vec<f32> = yd.iter().zip(g).map(|(&y, &gv)| gv * (1.0 - y * y)).collect();
                self.add_grad(grads, *x, &contrib);
            }
            Op::Sigmoid(x) => {
                let yd = val.data();
                let contrib: Vec<f32> = yd.iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                self.add_grad(grads, *x, &contrib);
            }
            Op::Exp(x) => {
                let yd = val.data();
                let contrib: Vec<f32> = yd.iter().zip(g).map(|(&y, &gv)| gv * y).collect();
                self.add_grad(grads, *x, &contrib);
            }
            Op::Log(x) => {
                let xd = self.nodes[x.0].value.data();
                let contrib: Vec<f32> = xd.iter().zip(g).map(|(&v, &gv)| gv / v).collect();
                self.add_grad(grads, *x, &contrib);
            }
            Op::LogSigmoid(x) => {
                let xd = self.nodes[x.0].value.data();
                let contrib: Vec<f32> =
                    xd.iter().zip(g).map(|(&v, &gv)| gv * sigmoid_f32(-v)).collect();
                self.add_grad(grads, *x, &contrib);
            }
            Op::Scale(x, c) => {
                let contrib: Vec<f32> = g.iter().map(|&gv| gv * c).collect();
                self.add_grad(grads, *x, &contrib);
            }
            Op::Bin(kind, a, b, bc) => self.backward_bin(*kind, *a, *b, *bc, g, grads),
            Op::MatMul { a, ta, b, tb } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k) = if *ta { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
                let n = if *tb { bv.rows() } else { bv.cols() };
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0f32; av.len()];
                    if !*ta {
                        // dA = g . B_l^T
                        sgemm(m, n, k, g, false, bv.data(), !*tb, &mut da);
                    } else {
                        // dA_storage = B_l . g^T
                        sgemm(k, n, m, bv.data(), *tb, g, true, &mut da);
                    }
                    self.add_grad(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0f32; bv.len()];
                    if !*tb {
                        // dB = A_l^T . g
                        sgemm(k, m, n, av.data(), !*ta, g, false, &mut db);
                    } else {
                        // dB_storage = g^T . A_l
                        sgemm(n, m, k, g, true, av.data(), *ta, &mut db);
                    }
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                self.add_grad(grads, *x, &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                self.add_grad(grads, *x, &vec![g[0] / n as f32; n]);
            }
            Op::LogSumExpRows(x) => {
                let xv = &self.nodes[x.0].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let xd = xv.data();
                let yd = val.data();
                let mut contrib = vec![0.0f32; xd.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        contrib[r * cols + c] = g[r] * (xd[r * cols + c] - yd[r]).exp();
                    }
                }
                self.add_grad(grads, *x, &contrib);
            }
            Op::SoftmaxRows(x) => {
                let yv = val;
                let (rows, cols) = (yv.rows(), yv.cols());
                let yd = yv.data();
                let mut contrib = vec![0.0f32; yd.len()];
                for r in 0..rows {
                    let dot: f32 =
                        (0..cols).map(|c| g[r * cols + c] * yd[r * cols + c]).sum();
                    for c in 0..cols {
                        contrib[r * cols + c] = yd[r * cols + c] * (g[r * cols + c] - dot);
                    }
                }
                self.add_grad(grads, *x, &contrib);
            }
            Op::ConcatCols(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (rows, ca, cb) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0f32; av.len()];
                    for r in 0..rows {
                        da[r * ca..(r + 1) * ca]
                            .copy_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    self.add_grad(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0f32; bv.len()];
                    for r in 0..rows {
                        db[r * cb..(r + 1) * cb]
                            .copy_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::ConcatRows(a, b) => {
                let alen = self.nodes[a.0].value.len();
                self.add_grad(grads, *a, &g[..alen]);
                self.add_grad(grads, *b, &g[alen..]);
            }
            Op::SliceRows { x, start, len } => {
                let xv = &self.nodes[x.0].value;
                let cols = xv.cols();
                let mut dx = vec![0.0f32; xv.len()];
                dx[start * cols..(start + len) * cols].copy_from_slice(g);
                self.add_grad(grads, *x, &dx);
            }
            Op::TakeRows { x, idx } => {
                let xv = &self.nodes[x.0].value;
                let cols = xv.cols();
                let mut dx = vec![0.0f32; xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[i * cols + c] += g[r * cols + c];
                    }
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::GatherCols { x, idx } => {
                let xv = &self.nodes[x.0].value;
                let cols = xv.cols();
                let mut dx = vec![0.0f32; xv.len()];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * cols + c] += g[r];
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::Diag(x) => {
                let xv = &self.nodes[x.0].value;
                let cols = xv.cols();
                let mut dx = vec![0.0f32; xv.len()];
                for (r, &gv) in g.iter().enumerate() {
                    dx[r * cols + r] = gv;
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::Reshape(x) => {
                self.add_grad(grads, *x, g);
            }
            Op::RmsNormRows { x, gain, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let xd = xv.data();
                let gd = gv.data();
                let mut dx = vec![0.0f32; xd.len()];
                let mut dgain = vec![0.0f32; cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let ms = row.iter().map(|&v| v * v).sum::<f32>() / cols as f32;
                    let inv = 1.0 / (ms + eps).sqrt();
                    // s = sum_c g_c * gain_c * x_c
                    let s: f32 = (0..cols).map(|c| grow[c] * gd[c] * row[c]).sum();
                    let coef = s * inv * inv * inv / cols as f32;
                    for c in 0..cols {
                        dx[r * cols + c] = grow[c] * gd[c] * inv - row[c] * coef;
                        dgain[c] += grow[c] * row[c] * inv;
                    }
                }
                self.add_grad(grads, *x, &dx);
                self.add_grad(grads, *gain, &dgain);
            }
            Op::Conv2dNhwc { x, w, b, kh, kw, stride, pad } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let xs = xv.shape();
                let (bs, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
                let out_c = wv.cols();
                let oh = conv_out(h, *kh, *stride, *pad);
                let ow = conv_out(wd, *kw, *stride, *pad);
                let rows = bs * oh * ow;
                let patch = kh * kw * c;
                let pointwise = node.aux.is_empty();
                let cols_owned;
                let cols_data: &[f32] = if pointwise {
                    xv.data()
                } else {
                    cols_owned = &node.aux[0];
                    cols_owned.data()
                };
                if let Some(bv) = b {
                    if self.nodes[bv.0].needs_grad {
                        let mut db = vec![0.0f32; out_c];
                        for r in 0..rows {
                            for j in 0..out_c {
                                db[j] += g[r * out_c + j];
                            }
                        }
                        self.add_grad(grads, *bv, &db);
                    }
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0f32; wv.len()];
                    sgemm(patch, rows, out_c, cols_data, true, g, false, &mut dw);
                    self.add_grad(grads, *w, &dw);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0f32; rows * patch];
                    sgemm(rows, out_c, patch, g, false, wv.data(), true, &mut dcols);
                    if pointwise {
                        self.add_grad(grads, *x, &dcols);
                    } else {
                        let dx = col2im(&dcols, bs, h, wd, c, *kh, *kw, *stride, *pad);
                        self.add_grad(grads, *x, &dx);
                    }
                }
            }
            Op::PairEnergy { z, zk, w1, b1, w2, b2 } => {
                self.backward_pair_energy(node, *z, *zk, *w1, *b1, *w2, *b2, g, grads);
            }
        }
    }

    fn backward_bin(
        &self,
        kind: BinKind,
        a: Var,
        b: Var,
        bc: Bcast,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (rows, cols) = (av.rows(), av.cols());

        // dA is g (Add/Sub) or g*b (Mul); dB reduces over broadcast dims with
        // a sign flip for Sub.
        if self.nodes[a.0].needs_grad {
            let contrib: Vec<f32> = match kind {
                BinKind::Add | BinKind::Sub => g.to_vec(),
                BinKind::Mul => {
                    let bd = bv.data();
                    match bc {
                        Bcast::Same => g.iter().zip(bd).map(|(&gv, &y)| gv * y).collect(),
                        Bcast::Scalar => g.iter().map(|&gv| gv * bd[0]).collect(),
                        Bcast::Row => (0..g.len()).map(|i| g[i] * bd[i % cols]).collect(),
                        Bcast::Col => (0..g.len()).map(|i| g[i] * bd[i / cols]).collect(),
                    }
                }
            };
            self.add_grad(grads, a, &contrib);
        }
        if self.nodes[b.0].needs_grad {
            let sign = if kind == BinKind::Sub { -1.0f32 } else { 1.0 };
            let ad = av.data();
            let mut contrib = vec![0.0f32; bv.len()];
            match bc {
                Bcast::Same => {
                    for i in 0..g.len() {
                        contrib[i] = sign
                            * match kind {
                                BinKind::Mul => g[i] * ad[i],
                                _ => g[i],
                            };
                    }
                }
                Bcast::Scalar => {
                    let mut s = 0.0f32;
                    for i in 0..g.len() {
                        s += match kind {
                            BinKind::Mul => g[i] * ad[i],
                            _ => g[i],
                        };
                    }
                    contrib[0] = sign * s;
                }
                Bcast::Row => {
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            contrib[c] += sign
                                * match kind {
                                    BinKind::Mul => g[i] * ad[i],
                                    _ => g[i],
                                };
                        }
                    }
                }
                Bcast::Col => {
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            contrib[r] += sign
                                * match kind {
                                    BinKind::Mul => g[i] * ad[i],
                                    _ => g[i],
                                };
                        }
                    }
                }
            }
            self.add_grad(grads, b, &contrib);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_pair_energy(
        &self,
        node: &Node,
        z: Var,
        zk: Var,
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let zv = &self.nodes[z.0].value;
        let zkv = &self.nodes[zk.0].value;
        let w1v = &self.nodes[w1.0].value;
        let w2v = &self.nodes[w2.0].value;
        let (bsz, d) = (zv.rows(), zv.cols());
        let hid = w1v.cols();
        let na = w2v.cols();
        let a_rows = node.aux[0].data();
        let bv_rows = node.aux[1].data();
        let s = node.aux[2].data();

        // db2
        if self.nodes[b2.0].needs_grad {
            let mut db2 = vec![0.0f32; na];
            for r in 0..bsz * bsz {
                for j in 0..na {
                    db2[j] += g[r * na + j];
                }
            }
            self.add_grad(grads, b2, &db2);
        }
        // dw2 = S^T . g
        if self.nodes[w2.0].needs_grad {
            let mut dw2 = vec![0.0f32; hid * na];
            sgemm(hid, bsz * bsz, na, s, true, g, false, &mut dw2);
            self.add_grad(grads, w2, &dw2);
        }
        // dS = g . w2^T, then dH = dS * silu'(preact)
        let mut dh = vec![0.0f32; bsz * bsz * hid];
        sgemm(bsz * bsz, na, hid, g, false, w2v.data(), true, &mut dh);
        let mut da = vec![0.0f32; bsz * hid];
        let mut dbv = vec![0.0f32; bsz * hid];
        for i in 0..bsz {
            let arow = &a_rows[i * hid..(i + 1) * hid];
            let da_row_start = i * hid;
            for j in 0..bsz {
                let brow = &bv_rows[j * hid..(j + 1) * hid];
                let row = &mut dh[(i * bsz + j) * hid..(i * bsz + j + 1) * hid];
                for hcol in 0..hid {
                    let pre = arow[hcol] + brow[hcol];
                    row[hcol] *= silu_grad_f32(pre);
                    da[da_row_start + hcol] += row[hcol];
                    dbv[j * hid + hcol] += row[hcol];
                }
            }
        }
        // b1 enters through every pair row once
        if self.nodes[b1.0].needs_grad {
            let mut db1 = vec![0.0f32; hid];
            for i in 0..bsz {
                for hcol in 0..hid {
                    db1[hcol] += da[i * hid + hcol];
                }
            }
            self.add_grad(grads, b1, &db1);
        }
        // dz = dA . w1[0..d]^T
        if self.nodes[z.0].needs_grad {
            let mut dz = vec![0.0f32; bsz * d];
            sgemm(bsz, hid, d, &da, false, &w1v.data()[..d * hid], true, &mut dz);
            self.add_grad(grads, z, &dz);
        }
        // dzk[j] = dBv_j . w1[d]
        if self.nodes[zk.0].needs_grad {
            let w1_last = &w1v.data()[d * hid..];
            let mut dzk = vec![0.0f32; bsz];
            for j in 0..bsz {
                let mut acc = 0.0f32;
                for hcol in 0..hid {
                    acc += dbv[j * hid + hcol] * w1_last[hcol];
                }
                dzk[j] = acc;
            }
            self.add_grad(grads, zk, &dzk);
        }
        // dw1: top d rows from z^T.dA, last row from zk^T.dBv
        if self.nodes[w1.0].needs_grad {
            let mut dw1 = vec![0.0f32; (d + 1) * hid];
            sgemm(d, bsz, hid, zv.data(), true, &da, false, &mut dw1[..d * hid]);
            let last = &mut dw1[d * hid..];
            for j in 0..bsz {
                let zkj = zkv.data()[j];
                for hcol in 0..hid {
                    last[hcol] += zkj * dbv[j * hid + hcol];
                }
            }
            self.add_grad(grads, w1, &dw1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![0.0]));
        let y = t.tanh(x);
        assert_eq!(t.value(y).data(), &[0.0]);
    }

    #[test]
    fn logsumexp_of_three_zeros_is_ln3() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let y = t.logsumexp_rows(x);
        let expect = 1.098_612_3f32; // ln 3 evaluated directly
        assert!((t.value(y).data()[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]));
        let y = t.softmax_rows(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let p = t.param("p", Tensor::new(vec![2, 3], vec![1.0; 6]));
        let l = t.sum(p);
        let g = t.backward(l);
        assert_eq!(g.get(p).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let p = t.param("p", Tensor::from_vec(vec![1.0, 2.0]));
        let sq = t.mul(p, p);
        let l = t.sum(sq);
        let g = t.backward(l);
        assert_eq!(g.get(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_grad_passes_value_blocks_grad() {
        let mut t = Tape::new();
        let p = t.param("p", Tensor::from_vec(vec![3.0]));
        let s = t.stop_grad(p);
        assert_eq!(t.value(s).data(), &[3.0]);
        let direct = t.scale(p, 2.0);
        let blocked = t.scale(s, 5.0);
        let both = t.add(direct, blocked);
        let l = t.sum(both);
        let g = t.backward(l);
        // only the 2x path contributes
        assert_eq!(g.get(p).unwrap().data(), &[2.0]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch for matmul")]
    fn matmul_shape_mismatch_reports_both() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![4, 5]));
        let _ = t.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let p = t.param("p", Tensor::from_vec(vec![1.0, 2.0]));
        let y = t.scale(p, 2.0);
        let _ = t.backward(y);
    }

    #[test]
    fn matmul_matches_by_hand() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = t.matmul(a, b);
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let ct = t.matmul_t(a, true, b, false);
        assert_eq!(t.value(ct).data(), &[26.0, 30.0, 38.0, 44.0]);
    }
}
