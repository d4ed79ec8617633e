//! Reverse-mode automatic differentiation over a linear Wengert tape.
//!
//! Every op appends one node holding its output value and whatever the
//! backward rule needs. Nodes only reference earlier nodes, so a single
//! reverse sweep visits them in topological order.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2D convolution, fixed at record time.
#[derive(Clone, Copy, Debug)]
struct ConvDims {
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

impl ConvDims {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var, channels: usize, inner: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, ta: bool, tb: bool },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, cols: Vec<f64>, dims: ConvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool, channels: usize, inner: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample2x { x: Var, n: usize, h: usize, w: usize },
    GatherRows { x: Var, idx: Vec<usize>, cols: usize },
    GatherPixels { x: Var, base: Vec<usize>, channels: usize, plane: usize },
    ConcatRows(Vec<Var>),
    NormalizeRows { x: Var, inv_norm: Vec<f64>, cols: usize },
    OffDiagLse { x: Var, softmax: Vec<f64>, n: usize },
    Take { x: Var, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batchnorm, used by the
/// caller to update running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Append-only record of a forward computation.
///
/// A tape is consumed by [`Tape::backward`]; build a fresh one per step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the root with respect to every tracked leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

pub const BN_EPS: f64 = 1e-5;

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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, tracked: bool) -> Var {
        self.push(t, Op::Leaf, tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("lhs {sa:?} vs rhs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Adds `bias[c]` along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match axis {axis} of {shape:?}", self.shape(bias)),
            ));
        }
        let channels = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += b[(i / inner) % channels];
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias, channels, inner }, rg))
    }

    /// Matrix product of rank-2 operands; `ta`/`tb` transpose the stored
    /// operand before multiplying.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", format!("operands must be rank 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner axes differ: lhs {sa:?} vs rhs {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            strides(ta, sa[1]),
            self.value(b).data(),
            strides(tb, sb[1]),
            0.0,
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, m, k, n, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        if !v.is_finite() {
            return Err(Error::Numeric("exp overflowed".into()));
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Exp(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let v = self.value(a).map(f64::ln);
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Log(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Direct 2D convolution (cross-correlation) of `x[N,C,H,W]` with
    /// `w[F,C,kh,kw]`, lowered to a single matrix product.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim("conv2d", format!("input {sx:?} and kernel {sw:?} must be rank 4")));
        }
        if sx[1] != sw[1] {
            return Err(Error::dim(
                "conv2d",
                format!("channel axis: input has {} channels, kernel expects {}", sx[1], sw[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel spatial axes {kh}x{kw} exceed padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let dims = ConvDims { n, c, h, w: wd, f, kh, kw, stride, pad, ho, wo };
        let cols = im2col(self.value(x).data(), &dims);
        let (pk, p) = (dims.patch(), dims.out_plane());
        let np = n * p;
        let mut tmp = vec![0.0; f * np];
        gemm(f, pk, np, self.value(w).data(), (pk as isize, 1), &cols, (np as isize, 1), 0.0, &mut tmp);
        let mut out = vec![0.0; n * f * p];
        for fi in 0..f {
            for ni in 0..n {
                out[(ni * f + fi) * p..(ni * f + fi + 1) * p].copy_from_slice(&tmp[fi * np + ni * p..fi * np + (ni + 1) * p]);
            }
        }
        let rg = self.any_grad(&[x, w]);
        let keep = if self.requires_grad(w) { cols } else { Vec::new() };
        Ok(self.push(Tensor::new([n, f, ho, wo], out)?, Op::Conv2d { x, w, cols: keep, dims }, rg))
    }

    /// Batch normalization over every axis except `1` (the channel axis).
    ///
    /// In training mode the batch statistics are used and returned; in
    /// eval mode `running` supplies mean and (unbiased) variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("batch_norm", format!("input {shape:?} needs a channel axis 1")));
        }
        let (outer, channels) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [channels] {
                return Err(Error::dim("batch_norm", format!("{name} {:?} vs {channels} channels", self.shape(v))));
            }
        }
        let xs = self.value(x).data();
        let count = (outer * inner) as f64;
        let (mean, var, stats) = match running {
            None => {
                if outer < 2 {
                    return Err(Error::Degenerate(format!("batch norm in training mode needs N >= 2, got {outer}")));
                }
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for o in 0..outer {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let base = (o * channels + ch) * inner;
                        *m += xs[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for o in 0..outer {
                    for ch in 0..channels {
                        let base = (o * channels + ch) * inner;
                        let mu = mean[ch];
                        var[ch] += xs[base..base + inner].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let unbiased = var.iter().map(|v| v * count / (count - 1.0)).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            Some((rm, rv)) => {
                if rm.len() != channels || rv.len() != channels {
                    return Err(Error::dim("batch_norm", "running statistics length differs from channel count"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for (i, (&xv, (xh, o))) in xs.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / inner) % channels;
            *xh = (xv - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + b[ch];
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let training = running.is_none();
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training, channels, inner },
            rg,
        );
        Ok((v, stats))
    }

    /// Max over `axis`; the gradient is routed to the first maximal entry.
    pub fn max_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("max_pool", format!("axis {axis} out of range for {shape:?}")));
        }
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    let slot = o * inner + i;
                    if j == 0 || xs[base + i] > out[slot] {
                        out[slot] = xs[base + i];
                        argmax[slot] = base + i;
                    }
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Nearest-neighbour ×2 upsampling of `x[N,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("upsample2x", format!("input {s:?} must be rank 4")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let xs = self.value(x).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xs[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([s[0], s[1], 2 * h, 2 * w], out)?, Op::Upsample2x { x, n: planes, h, w }, rg))
    }

    /// Channel vectors `x[n, :, y, x]` of a rank-4 tensor for each
    /// `(n, y, x)` in `pixels`, stacked as rows.
    pub fn gather_pixels(&mut self, x: Var, pixels: &[(usize, usize, usize)]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("gather_pixels", format!("input {s:?} must be rank 4")));
        }
        if pixels.is_empty() {
            return Err(Error::Degenerate("gather_pixels with no pixels".into()));
        }
        let (channels, h, w) = (s[1], s[2], s[3]);
        let plane = h * w;
        let mut base = Vec::with_capacity(pixels.len());
        for &(n, y, xx) in pixels {
            if n >= s[0] || y >= h || xx >= w {
                return Err(Error::contract(format!("pixel ({n}, {y}, {xx}) out of range for {s:?}")));
            }
            base.push(n * channels * plane + y * w + xx);
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(pixels.len() * channels);
        for &b in &base {
            out.extend((0..channels).map(|c| xs[b + c * plane]));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([pixels.len(), channels], out)?, Op::GatherPixels { x, base, channels, plane }, rg))
    }

    /// Rows `idx` of a rank-2 tensor, in order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", format!("input {s:?} must be rank 2")));
        }
        if idx.is_empty() {
            return Err(Error::Degenerate("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::contract(format!("row index {bad} out of range for {} rows", s[0])));
        }
        let cols = s[1];
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&xs[i * cols..(i + 1) * cols]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([idx.len(), cols], out)?, Op::GatherRows { x, idx: idx.to_vec(), cols }, rg))
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Degenerate("concat_rows of nothing".into()));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::dim("concat_rows", format!("trailing axes {:?} vs {tail:?}", &s[1..])));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Scales every row of a rank-2 tensor to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.normalize_rows_impl(x, false)
    }

    /// As [`normalize_rows`](Self::normalize_rows), except that an all-zero
    /// row maps to zero and passes no gradient back.
    pub fn normalize_rows_or_zero(&mut self, x: Var) -> Result<Var> {
        self.normalize_rows_impl(x, true)
    }

    fn normalize_rows_impl(&mut self, x: Var, zero_ok: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("normalize_rows", format!("input {s:?} must be rank 2")));
        }
        let cols = s[1];
        let xs = self.value(x).data();
        let mut inv_norm = Vec::with_capacity(s[0]);
        let mut out = vec![0.0; xs.len()];
        for r in 0..s[0] {
            let row = &xs[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm == 0.0 && !zero_ok) {
                return Err(Error::Degenerate(format!("row {r} has zero or non-finite norm")));
            }
            let inv = if norm == 0.0 { 0.0 } else { 1.0 / norm };
            inv_norm.push(inv);
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(s, out)?, Op::NormalizeRows { x, inv_norm, cols }, rg))
    }

    /// For a square `x[n,n]`, `out[r] = log Σ_{c≠r} exp(x[r,c])`, evaluated
    /// stably by subtracting the row maximum.
    pub fn offdiag_logsumexp(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::dim("offdiag_logsumexp", format!("input {s:?} must be square")));
        }
        let n = s[0];
        if n < 2 {
            return Err(Error::Degenerate("off-diagonal log-sum-exp needs at least 2 rows".into()));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; n];
        let mut softmax = vec![0.0; n * n];
        for r in 0..n {
            let row = &xs[r * n..(r + 1) * n];
            let mx = row.iter().enumerate().filter(|&(c, _)| c != r).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in (0..n).filter(|&c| c != r) {
                let e = (row[c] - mx).exp();
                softmax[r * n + c] = e;
                z += e;
            }
            for c in 0..n {
                softmax[r * n + c] /= z;
            }
            out[r] = mx + z.ln();
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_vec(out), Op::OffDiagLse { x, softmax, n }, rg))
    }

    /// Flat-indexed element selection.
    pub fn take(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if idx.is_empty() {
            return Err(Error::Degenerate("take with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("flat index {bad} out of range for {n} elements")));
        }
        let xs = self.value(x).data();
        let out = idx.iter().map(|&i| xs[i]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_vec(out), Op::Take { x, idx: idx.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        let Tape { nodes } = self;
        if nodes[root.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::ones(nodes[root.0].value.shape().to_vec()));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor| {
                if nodes[v.0].requires_grad {
                    match &mut grads[v.0] {
                        Some(existing) => existing.add_assign(&t),
                        slot => *slot = Some(t),
                    }
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(val(*b), |x, y| x * y);
                    let gb = g.zip(val(*a), |x, y| x * y);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::AddBias { x, bias, channels, inner } => {
                    let mut gb = vec![0.0; *channels];
                    for (j, v) in g.data().iter().enumerate() {
                        gb[(j / inner) % channels] += v;
                    }
                    acc(*bias, Tensor::from_vec(gb));
                    acc(*x, g);
                }
                Op::MatMul { a, b, m, k, n, ta, tb } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[a.0].requires_grad {
                        // dA = dC · Bᵀ, laid out to match A's storage.
                        let mut da = vec![0.0; m * k];
                        let (rsb, csb) = strides(*tb, bv.shape()[1]);
                        if *ta {
                            // stored A is [k,m]: dA_s = B · dCᵀ
                            gemm(k, n, m, bv.data(), (rsb, csb), g.data(), (1, n as isize), 0.0, &mut da);
                        } else {
                            gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), (csb, rsb), 0.0, &mut da);
                        }
                        acc(*a, Tensor::new(av.shape().to_vec(), da).expect("matmul grad shape"));
                    }
                    if nodes[b.0].requires_grad {
                        // dB = Aᵀ · dC, laid out to match B's storage.
                        let mut db = vec![0.0; k * n];
                        let (rsa, csa) = strides(*ta, av.shape()[1]);
                        if *tb {
                            // stored B is [n,k]: dB_s = dCᵀ · A
                            gemm(n, m, k, g.data(), (1, n as isize), av.data(), (rsa, csa), 0.0, &mut db);
                        } else {
                            gemm(k, m, n, av.data(), (csa, rsa), g.data(), (n as isize, 1), 0.0, &mut db);
                        }
                        acc(*b, Tensor::new(bv.shape().to_vec(), db).expect("matmul grad shape"));
                    }
                }
                Op::Relu(a) => {
                    let ga = g.zip(&node.value, |x, y| if y > 0.0 { x } else { 0.0 });
                    acc(*a, ga);
                }
                Op::Exp(a) => acc(*a, g.zip(&node.value, |x, y| x * y)),
                Op::Log(a) => acc(*a, g.zip(val(*a), |x, y| x / y)),
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    acc(*a, Tensor::full(val(*a).shape().to_vec(), gv));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, Tensor::new(shape, g.into_data()).expect("reshape grad"));
                }
                Op::Conv2d { x, w, cols, dims } => {
                    let d = *dims;
                    let (pk, p) = (d.patch(), d.out_plane());
                    let np = d.n * p;
                    let mut gt = vec![0.0; d.f * np];
                    for fi in 0..d.f {
                        for ni in 0..d.n {
                            gt[fi * np + ni * p..fi * np + (ni + 1) * p]
                                .copy_from_slice(&g.data()[(ni * d.f + fi) * p..(ni * d.f + fi + 1) * p]);
                        }
                    }
                    if nodes[w.0].requires_grad {
                        let mut dw = vec![0.0; d.f * pk];
                        gemm(d.f, np, pk, &gt, (np as isize, 1), cols, (1, np as isize), 0.0, &mut dw);
                        acc(*w, Tensor::new(val(*w).shape().to_vec(), dw).expect("conv grad"));
                    }
                    if nodes[x.0].requires_grad {
                        let mut dcols = vec![0.0; pk * np];
                        gemm(pk, d.f, np, val(*w).data(), (1, pk as isize), &gt, (np as isize, 1), 0.0, &mut dcols);
                        let dx = col2im(&dcols, &d);
                        acc(*x, Tensor::new(val(*x).shape().to_vec(), dx).expect("conv grad"));
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, training, channels, inner } => {
                    let (channels, inner) = (*channels, *inner);
                    let gs = g.data();
                    let mut dgamma = vec![0.0; channels];
                    let mut dbeta = vec![0.0; channels];
                    for (j, (&gv, &xh)) in gs.iter().zip(xhat).enumerate() {
                        let ch = (j / inner) % channels;
                        dbeta[ch] += gv;
                        dgamma[ch] += gv * xh;
                    }
                    if nodes[x.0].requires_grad {
                        let gam = val(*gamma).data();
                        let count = (gs.len() / channels) as f64;
                        let dx: Vec<f64> = gs
                            .iter()
                            .zip(xhat)
                            .enumerate()
                            .map(|(j, (&gv, &xh))| {
                                let ch = (j / inner) % channels;
                                if *training {
                                    gam[ch] * inv_std[ch] / count * (count * gv - dbeta[ch] - xh * dgamma[ch])
                                } else {
                                    gv * gam[ch] * inv_std[ch]
                                }
                            })
                            .collect();
                        acc(*x, Tensor::new(val(*x).shape().to_vec(), dx).expect("bn grad"));
                    }
                    acc(*gamma, Tensor::from_vec(dgamma));
                    acc(*beta, Tensor::from_vec(dbeta));
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(val(*x).shape().to_vec());
                    let d = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src] += gv;
                    }
                    acc(*x, dx);
                }
                Op::Upsample2x { x, n, h, w } => {
                    let (h, w) = (*h, *w);
                    let mut dx = Tensor::zeros(val(*x).shape().to_vec());
                    let d = dx.data_mut();
                    let gs = g.data();
                    for p in 0..*n {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(p * h + y / 2) * w + xx / 2] += gs[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::GatherRows { x, idx, cols } => {
                    let mut dx = Tensor::zeros(val(*x).shape().to_vec());
                    let d = dx.data_mut();
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..*cols {
                            d[src * cols + c] += g.data()[r * cols + c];
                        }
                    }
                    acc(*x, dx);
                }
                Op::GatherPixels { x, base, channels, plane } => {
                    let mut dx = Tensor::zeros(val(*x).shape().to_vec());
                    let d = dx.data_mut();
                    for (r, &b) in base.iter().enumerate() {
                        for c in 0..*channels {
                            d[b + c * plane] += g.data()[r * channels + c];
                        }
                    }
                    acc(*x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = val(*p).shape().to_vec();
                        let len = val(*p).len();
                        let part = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        acc(*p, Tensor::new(shape, part).expect("concat grad"));
                    }
                }
                Op::NormalizeRows { x, inv_norm, cols } => {
                    let y = node.value.data();
                    let gs = g.data();
                    let mut dx = vec![0.0; gs.len()];
                    for (r, inv) in inv_norm.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = gs[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in span {
                            dx[j] = (gs[j] - y[j] * dot) * inv;
                        }
                    }
                    acc(*x, Tensor::new(val(*x).shape().to_vec(), dx).expect("normalize grad"));
                }
                Op::OffDiagLse { x, softmax, n } => {
                    let n = *n;
                    let mut dx = vec![0.0; n * n];
                    for (r, &gv) in g.data().iter().enumerate() {
                        for c in 0..n {
                            dx[r * n + c] = gv * softmax[r * n + c];
                        }
                    }
                    acc(*x, Tensor::new([n, n], dx).expect("lse grad"));
                }
                Op::Take { x, idx } => {
                    let mut dx = Tensor::zeros(val(*x).shape().to_vec());
                    let d = dx.data_mut();
                    for (&src, &gv) in idx.iter().zip(g.data()) {
                        d[src] += gv;
                    }
                    acc(*x, dx);
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn strides(transposed: bool, stored_cols: usize) -> (isize, isize) {
    if transposed {
        (1, stored_cols as isize)
    } else {
        (stored_cols as isize, 1)
    }
}

/// Lowers `x[N,C,H,W]` to a `[C·kh·kw, N·Ho·Wo]` patch matrix.
fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let p = d.out_plane();
    let np = d.n * p;
    let mut cols = vec![0.0; d.patch() * np];
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                for n in 0..d.n {
                    let plane = &x[(n * d.c + c) * d.h * d.w..(n * d.c + c + 1) * d.h * d.w];
                    let dst = &mut cols[row * np + n * p..row * np + (n + 1) * p];
                    for oy in 0..d.ho {
                        let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for ox in 0..d.wo {
                            let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst[oy * d.wo + ox] = plane[iy as usize * d.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], d: &ConvDims) -> Vec<f64> {
    let p = d.out_plane();
    let np = d.n * p;
    let mut x = vec![0.0; d.n * d.c * d.h * d.w];
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                for n in 0..d.n {
                    let src = &cols[row * np + n * p..row * np + (n + 1) * p];
                    let plane = &mut x[(n * d.c + c) * d.h * d.w..(n * d.c + c + 1) * d.h * d.w];
                    for oy in 0..d.ho {
                        let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for ox in 0..d.wo {
                            let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                plane[iy as usize * d.w + ix as usize] += src[oy * d.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
