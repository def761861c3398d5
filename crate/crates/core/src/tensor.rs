//! Dense f32 tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation as a node appended in evaluation
//! order. Node indices are therefore already a topological order, and
//! [`Graph::backward`] walks them in reverse exactly once.

use crate::error::{Error, Result};

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape. Nodes are immutable once recorded.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn softplus_scalar(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus for positive inputs.
pub(crate) fn softplus_inverse(y: f32) -> f32 {
    let y = y as f64;
    if y > 20.0 {
        y as f32
    } else {
        y.exp_m1().ln() as f32
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out[m,n] += a[m,k] · b[k,n]
fn mm_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
fn mm_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
fn mm_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api != 0.0 {
                axpy(api, br, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn spatial(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let hw = g.spatial();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let hw = g.spatial();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let rows = shape.iter().product::<usize>().checked_div(last).unwrap_or(0);
    (rows, last)
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let Tensor {
            shape,
            data,
            requires_grad,
            ..
        } = tensor;
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?.with_grad()))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value.data
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, rg, op)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, rg, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// `x · wᵀ` with `x: [m, k]` and `w: [n, k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (m, k, n) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; m * n];
        mm_nt(self.data(x), self.data(w), &mut out, m, k, n);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![m, n], out, rg, Op::Linear(x, w)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, rg, Op::Transpose(a)))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<ConvGeom> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let err = || Error::Shape {
            op: "conv2d",
            lhs: sx.to_vec(),
            rhs: sw.to_vec(),
        };
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(err());
        }
        let (h, wd) = (sx[2] + 2 * padding, sx[3] + 2 * padding);
        if h < sw[2] || wd < sw[3] {
            return Err(err());
        }
        Ok(ConvGeom {
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad: padding,
            ho: (h - sw[2]) / stride + 1,
            wo: (wd - sw[3]) / stride + 1,
        })
    }

    /// 2-D cross-correlation, `x: [N, C, H, W]`, `w: [O, C, KH, KW]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, stride, padding)?;
        let n = self.shape(x)[0];
        let in_size = g.c * g.h * g.w;
        let out_size = g.o * g.spatial();
        let mut out = vec![0.0; n * out_size];
        let mut cols = vec![0.0; g.cols() * g.spatial()];
        let (xd, wd) = (self.data(x), self.data(w));
        for s in 0..n {
            im2col(&xd[s * in_size..(s + 1) * in_size], &g, &mut cols);
            mm_nn(
                wd,
                &cols,
                &mut out[s * out_size..(s + 1) * out_size],
                g.o,
                g.cols(),
                g.spatial(),
            );
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            vec![n, g.o, g.ho, g.wo],
            out,
            rg,
            Op::Conv2d {
                input: x,
                weight: w,
                stride,
                padding,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn channel_layout(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize, usize)> {
        let (sx, sc) = (self.shape(x), self.shape(c));
        if sx.len() < 2 || sc.iter().product::<usize>() != sx[1] {
            return Err(Error::Shape {
                op,
                lhs: sx.to_vec(),
                rhs: sc.to_vec(),
            });
        }
        let inner: usize = sx[2..].iter().product();
        Ok((sx[0], sx[1], inner))
    }

    fn channel_map(&mut self, x: Var, c: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let name = if matches!(op, Op::AddChannel(..)) {
            "add_channel"
        } else {
            "mul_channel"
        };
        let (n, ch, inner) = self.channel_layout(name, x, c)?;
        let (xd, cd) = (self.data(x), self.data(c));
        let mut out = Vec::with_capacity(xd.len());
        for s in 0..n {
            for k in 0..ch {
                let base = (s * ch + k) * inner;
                out.extend(xd[base..base + inner].iter().map(|&v| f(v, cd[k])));
            }
        }
        let rg = self.rg(x) || self.rg(c);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, rg, op))
    }

    /// Adds `b[c]` along axis 1 of `x` (bias for linear and conv outputs).
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        self.channel_map(x, b, Op::AddChannel(x, b), |v, c| v + c)
    }

    /// Multiplies axis 1 of `x` by `g[c]`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        self.channel_map(x, g, Op::MulChannel(x, g), |v, c| v * c)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus_scalar)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f32::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f32::exp)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (rows, k) = rows_of(self.shape(a));
        let mut out = self.data(a).to_vec();
        for r in 0..rows {
            softmax_row(&mut out[r * k..(r + 1) * k]);
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (rows, k) = rows_of(self.shape(a));
        let mut out = self.data(a).to_vec();
        for r in 0..rows {
            let row = &mut out[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s as f32], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::Shape {
                op: "mean",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let s: f64 = self.data(a).iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        Ok(self.push(Vec::new(), vec![(s / n as f64) as f32], rg, Op::Mean(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, data, rg, Op::Reshape(a)))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(a, vec![n, rest])
    }

    /// 2×2 max pooling with stride 2 on `[N, C, H, W]`; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Shape {
                op: "max_pool2",
                lhs: s,
                rhs: vec![2, 2],
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(a);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, c, ho, wo], out, rg, Op::MaxPool2 { input: a, argmax }))
    }

    /// Mean over spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                lhs: s,
                rhs: vec![],
            });
        }
        let hw = s[2] * s[3];
        let out: Vec<f32> = self
            .data(a)
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(vec![s[0], s[1]], out, rg, Op::GlobalAvgPool(a)))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: label {bad} with {k} classes"
            )));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &mut probs[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            loss += (lse - row[label]) as f64;
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![(loss / n as f64) as f32],
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        let mut adj: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad {
                continue;
            }
            let y = &node.value.data;
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if self.rg(*a) {
                        mm_nt(&g, self.data(*b), self.adj_buf(&mut adj, *a), m, n, k);
                    }
                    if self.rg(*b) {
                        mm_tn(self.data(*a), &g, self.adj_buf(&mut adj, *b), k, m, n);
                    }
                }
                Op::Linear(x, w) => {
                    let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let n = self.shape(*w)[0];
                    if self.rg(*x) {
                        mm_nn(&g, self.data(*w), self.adj_buf(&mut adj, *x), m, n, k);
                    }
                    if self.rg(*w) {
                        mm_tn(&g, self.data(*x), self.adj_buf(&mut adj, *w), n, m, k);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let buf = self.adj_buf(&mut adj, *a);
                    for i2 in 0..r {
                        for j in 0..c {
                            buf[i2 * c + j] += g[j * r + i2];
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    stride,
                    padding,
                } => {
                    let geom = self.conv_geom(*input, *weight, *stride, *padding)?;
                    let n = self.shape(*input)[0];
                    let in_size = geom.c * geom.h * geom.w;
                    let out_size = geom.o * geom.spatial();
                    let mut cols = vec![0.0; geom.cols() * geom.spatial()];
                    let mut dcols = vec![0.0; geom.cols() * geom.spatial()];
                    let (need_x, need_w) = (self.rg(*input), self.rg(*weight));
                    let mut dw = vec![0.0; if need_w { self.data(*weight).len() } else { 0 }];
                    let mut dx = vec![0.0; if need_x { n * in_size } else { 0 }];
                    let (xd, wd) = (self.data(*input), self.data(*weight));
                    for s in 0..n {
                        let go = &g[s * out_size..(s + 1) * out_size];
                        if need_w {
                            im2col(&xd[s * in_size..(s + 1) * in_size], &geom, &mut cols);
                            mm_nt(go, &cols, &mut dw, geom.o, geom.spatial(), geom.cols());
                        }
                        if need_x {
                            dcols.iter_mut().for_each(|v| *v = 0.0);
                            mm_tn(wd, go, &mut dcols, geom.cols(), geom.o, geom.spatial());
                            col2im(&dcols, &geom, &mut dx[s * in_size..(s + 1) * in_size]);
                        }
                    }
                    if need_w {
                        axpy(1.0, &dw, self.adj_buf(&mut adj, *weight));
                    }
                    if need_x {
                        axpy(1.0, &dx, self.adj_buf(&mut adj, *input));
                    }
                }
                Op::Add(a, b) => {
                    for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                        if self.rg(v) {
                            axpy(sign, &g, self.adj_buf(&mut adj, v));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                        if self.rg(v) {
                            axpy(sign, &g, self.adj_buf(&mut adj, v));
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bd = self.data(*b);
                        let buf = self.adj_buf(&mut adj, *a);
                        for ((o, gi), bi) in buf.iter_mut().zip(&g).zip(bd) {
                            *o += gi * bi;
                        }
                    }
                    if self.rg(*b) {
                        let ad = self.data(*a);
                        let buf = self.adj_buf(&mut adj, *b);
                        for ((o, gi), ai) in buf.iter_mut().zip(&g).zip(ad) {
                            *o += gi * ai;
                        }
                    }
                }
                Op::AddChannel(x, b) | Op::MulChannel(x, b) => {
                    let is_mul = matches!(node.op, Op::MulChannel(..));
                    let sx = self.shape(*x);
                    let (n, ch, inner) = (sx[0], sx[1], sx[2..].iter().product::<usize>());
                    if self.rg(*x) {
                        if is_mul {
                            let cd = self.data(*b).to_vec();
                            let buf = self.adj_buf(&mut adj, *x);
                            for (idx, (o, gi)) in buf.iter_mut().zip(&g).enumerate() {
                                *o += gi * cd[(idx / inner) % ch];
                            }
                        } else {
                            axpy(1.0, &g, self.adj_buf(&mut adj, *x));
                        }
                    }
                    if self.rg(*b) {
                        let mut acc = vec![0.0f64; ch];
                        let xd = self.data(*x);
                        for s in 0..n {
                            for k in 0..ch {
                                let base = (s * ch + k) * inner;
                                let gs = &g[base..base + inner];
                                acc[k] += if is_mul {
                                    gs.iter()
                                        .zip(&xd[base..base + inner])
                                        .map(|(a, b)| (a * b) as f64)
                                        .sum::<f64>()
                                } else {
                                    gs.iter().map(|&a| a as f64).sum::<f64>()
                                };
                            }
                        }
                        let buf = self.adj_buf(&mut adj, *b);
                        for (o, a) in buf.iter_mut().zip(acc) {
                            *o += a as f32;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    axpy(c, &g, self.adj_buf(&mut adj, *a));
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    axpy(1.0, &g, self.adj_buf(&mut adj, *a));
                }
                Op::Relu(a) => {
                    let xd = self.data(*a);
                    let buf = self.adj_buf(&mut adj, *a);
                    for ((o, gi), xi) in buf.iter_mut().zip(&g).zip(xd) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
                Op::Softplus(a) => {
                    let xd = self.data(*a);
                    let buf = self.adj_buf(&mut adj, *a);
                    for ((o, gi), xi) in buf.iter_mut().zip(&g).zip(xd) {
                        *o += gi * sigmoid_scalar(*xi);
                    }
                }
                Op::Log(a) => {
                    let xd = self.data(*a);
                    let buf = self.adj_buf(&mut adj, *a);
                    for ((o, gi), xi) in buf.iter_mut().zip(&g).zip(xd) {
                        *o += gi / xi;
                    }
                }
                Op::Exp(a) => {
                    let buf = self.adj_buf(&mut adj, *a);
                    for ((o, gi), yi) in buf.iter_mut().zip(&g).zip(y) {
                        *o += gi * yi;
                    }
                }
                Op::Softmax(a) => {
                    let (rows, k) = rows_of(&node.value.shape);
                    let buf = self.adj_buf(&mut adj, *a);
                    for r in 0..rows {
                        let (gr, yr) = (&g[r * k..(r + 1) * k], &y[r * k..(r + 1) * k]);
                        let inner: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            buf[r * k + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let (rows, k) = rows_of(&node.value.shape);
                    let buf = self.adj_buf(&mut adj, *a);
                    for r in 0..rows {
                        let (gr, yr) = (&g[r * k..(r + 1) * k], &y[r * k..(r + 1) * k]);
                        let total: f32 = gr.iter().sum();
                        for j in 0..k {
                            buf[r * k + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    self.adj_buf(&mut adj, *a).iter_mut().for_each(|o| *o += g0);
                }
                Op::Mean(a) => {
                    let g0 = g[0] / self.data(*a).len() as f32;
                    self.adj_buf(&mut adj, *a).iter_mut().for_each(|o| *o += g0);
                }
                Op::MaxPool2 { input, argmax } => {
                    let buf = self.adj_buf(&mut adj, *input);
                    for (gi, &src) in g.iter().zip(argmax) {
                        buf[src] += gi;
                    }
                }
                Op::GlobalAvgPool(a) => {
                    let s = self.shape(*a);
                    let hw = s[2] * s[3];
                    let buf = self.adj_buf(&mut adj, *a);
                    for (plane, gi) in g.iter().enumerate() {
                        let v = gi / hw as f32;
                        buf[plane * hw..(plane + 1) * hw]
                            .iter_mut()
                            .for_each(|o| *o += v);
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f32;
                    let buf = self.adj_buf(&mut adj, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == label { 1.0 } else { 0.0 };
                            buf[r * k + j] += scale * (probs[r * k + j] - target);
                        }
                    }
                }
            }
        }

        for (i, g) in leaf_grads {
            let t = &mut self.nodes[i].value;
            match &mut t.grad {
                Some(acc) => axpy(1.0, &g, acc),
                None => t.grad = Some(g),
            }
        }
        Ok(())
    }

    fn adj_buf<'a>(&self, adj: &'a mut [Option<Vec<f32>>], v: Var) -> &'a mut [f32] {
        let n = self.nodes[v.0].value.data.len();
        adj[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s: f32 = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
