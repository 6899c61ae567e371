//! Operation tape and reverse-mode sweep.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are borrowed
//! from a [`ParamStore`] rather than copied; intermediate values are owned by
//! the tape. [`Graph::backward`] walks the tape in reverse and returns the
//! gradients of all trainable parameters and of any inputs created with
//! [`Graph::input_with_grad`].

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{gemm, Padding, Window};
use super::{cst, Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How per-item losses are reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var, bt: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Dropout { x: Var, mask: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, win: Window },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, win: Window },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Upsample2d { x: Var, sh: usize, sw: usize },
    Reshape(Var),
    Concat { parts: Vec<Var>, rows: bool },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm2d { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, batch_stats: bool },
    L2Normalize { x: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Option<Vec<T>>, probs: Vec<T>, scale: T },
    BceWithLogits { logits: Var, targets: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Recording tape for one forward/backward pass.
pub struct Graph<'s, T: Float = f32> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    training: bool,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

fn relu_grad_mask<T: Float>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

fn gelu<T: Float>(x: T) -> T {
    x * cst::<T>(0.5) * (T::one() + (x * cst::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let cdf = cst::<T>(0.5) * (T::one() + (x * cst::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-x * x * cst::<T>(0.5)).exp() * cst::<T>(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Float>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += *b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

fn add_into_with<T: Float>(dst: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = dst.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<'s, T: Float> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            training,
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Running-statistic updates recorded by batch-norm layers in training mode.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.store.is_trainable(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![0; rank],
            });
        }
        Ok(())
    }

    /// `x·W + b` for `x: [B, I]`, `W: [I, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.expect_rank("linear", x, 2)?;
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("linear", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::dim("linear bias", ws, bs));
        }
        let (batch, inp, out) = (xs[0], ws[0], ws[1]);
        let mut y = vec![T::zero(); batch * out];
        let bias = self.value(b).data();
        for row in y.chunks_mut(out.max(1)) {
            row.copy_from_slice(bias);
        }
        gemm(false, false, batch, out, inp, T::one(), self.value(x).data(), self.value(w).data(), T::one(), &mut y);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(&[batch, out], y)?, Op::Linear { x, w, b }, ng))
    }

    /// `a·b` for `a: [M, K]`, `b: [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: [M, K]`, `b: [N, K]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        self.expect_rank("matmul", a, 2)?;
        self.expect_rank("matmul", b, 2)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if bt { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim("matmul", sa, sb));
        }
        let mut y = vec![T::zero(); m * n];
        gemm(false, bt, m, n, k, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], y)?, Op::MatMul { a, b, bt }, ng))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.map(x, |v| v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Identity outside training.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = cst::<T>(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(src.shape(), data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Dropout { x, mask }, ng))
    }

    /// Stride-1 cross-correlation. `x: [B, C, H, W]`, `w: [K, C, kh, kw]`, `b: [K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Result<Var> {
        self.expect_rank("conv2d", x, 4)?;
        self.expect_rank("conv2d", w, 4)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c != kc {
            return Err(Error::dim("conv2d channels", &xs, &ws));
        }
        if matches!(padding, Padding::Same) && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::Parameter("same padding requires odd kernel extents".into()));
        }
        let (ph, pw) = padding.resolve(kh, kw);
        if kh > h + 2 * ph || kw > wd + 2 * pw {
            return Err(Error::dim("conv2d kernel larger than padded input", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(Error::dim("conv2d bias", &ws, self.shape(b)));
            }
        }
        let win = Window { channels: c, h, w: wd, kh, kw, ph, pw };
        let (oh, ow) = (win.out_h(), win.out_w());
        let (rows, ncols) = (win.col_rows(), win.col_cols());
        let mut cols = vec![T::zero(); rows * ncols];
        let mut y = vec![T::zero(); batch * k * ncols];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        for bi in 0..batch {
            win.im2col(&xd[bi * c * h * wd..(bi + 1) * c * h * wd], &mut cols);
            let out = &mut y[bi * k * ncols..(bi + 1) * k * ncols];
            gemm(false, false, k, ncols, rows, T::one(), wdat, &cols, T::zero(), out);
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (ch, plane) in out.chunks_mut(ncols).enumerate() {
                    for v in plane {
                        *v += bd[ch];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(&[batch, k, oh, ow], y)?, Op::Conv2d { x, w, b, win }, ng))
    }

    /// Stride-1 transposed convolution. `x: [B, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`.
    /// Output extent is `H + kh - 1 - 2·pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Result<Var> {
        self.expect_rank("conv_transpose2d", x, 4)?;
        self.expect_rank("conv_transpose2d", w, 4)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (wc, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wc {
            return Err(Error::dim("conv_transpose2d channels", &xs, &ws));
        }
        let (ph, pw) = padding.resolve(kh, kw);
        if h + kh < 2 * ph + 2 || wd + kw < 2 * pw + 2 {
            return Err(Error::dim("conv_transpose2d padding exceeds output", &xs, &ws));
        }
        let (oh, ow) = (h + kh - 1 - 2 * ph, wd + kw - 1 - 2 * pw);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv_transpose2d bias", &ws, self.shape(b)));
            }
        }
        // Sliding window over the *output* image whose grid is the input extent.
        let win = Window { channels: cout, h: oh, w: ow, kh, kw, ph, pw };
        debug_assert_eq!((win.out_h(), win.out_w()), (h, wd));
        let rows = win.col_rows();
        let hw = h * wd;
        let mut cols = vec![T::zero(); rows * hw];
        let mut y = vec![T::zero(); batch * cout * oh * ow];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        for bi in 0..batch {
            gemm(true, false, rows, hw, cin, T::one(), wdat, &xd[bi * cin * hw..(bi + 1) * cin * hw], T::zero(), &mut cols);
            let out = &mut y[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            win.col2im(&cols, out);
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (ch, plane) in out.chunks_mut(oh * ow).enumerate() {
                    for v in plane {
                        *v += bd[ch];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(&[batch, cout, oh, ow], y)?, Op::ConvTranspose2d { x, w, b, win }, ng))
    }

    /// Non-overlapping max pooling with window `(kh, kw)`; trailing remainders are dropped.
    pub fn max_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        self.expect_rank("max_pool2d", x, 4)?;
        let s = self.shape(x).to_vec();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(Error::dim("max_pool2d", &s, &[kh, kw]));
        }
        let (oh, ow) = (h / kh, w / kw);
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * kh * w + ox * kw;
                    for i in 0..kh {
                        for j in 0..kw {
                            let idx = base + (oy * kh + i) * w + ox * kw + j;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], oh, ow], y)?, Op::MaxPool2d { x, argmax }, ng))
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample2d(&mut self, x: Var, sh: usize, sw: usize) -> Result<Var> {
        self.expect_rank("upsample2d", x, 4)?;
        let s = self.shape(x).to_vec();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * sh, w * sw);
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                let src = &xd[p * h * w + (oy / sh) * w..p * h * w + (oy / sh + 1) * w];
                for ox in 0..ow {
                    y.push(src[ox / sw]);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], oh, ow], y)?, Op::Upsample2d { x, sh, sw }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Flattens everything but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    /// Concatenates 2-D values along columns (`rows == false`) or rows.
    fn concat(&mut self, parts: &[Var], rows: bool) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero values".into()));
        };
        for &p in parts {
            self.expect_rank("concat", p, 2)?;
        }
        let fs = self.shape(first).to_vec();
        let t = if rows {
            let width = fs[1];
            let mut data = Vec::new();
            let mut n = 0;
            for &p in parts {
                let s = self.shape(p);
                if s[1] != width {
                    return Err(Error::dim("concat_rows", &fs, s));
                }
                n += s[0];
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(&[n, width], data)?
        } else {
            let batch = fs[0];
            let mut widths = Vec::new();
            for &p in parts {
                let s = self.shape(p);
                if s[0] != batch {
                    return Err(Error::dim("concat_cols", &fs, s));
                }
                widths.push(s[1]);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(batch * total);
            for r in 0..batch {
                for (&p, &wdt) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&self.value(p).data()[r * wdt..(r + 1) * wdt]);
                }
            }
            Tensor::new(&[batch, total], data)?
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), rows }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, false)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, true)
    }

    /// Per-row normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.expect_rank("layer_norm", x, 2)?;
        let s = self.shape(x).to_vec();
        let f = s[1];
        if self.shape(gain) != [f] || self.shape(bias) != [f] {
            return Err(Error::dim("layer_norm", &s, self.shape(gain)));
        }
        let xd = self.value(x).data();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(s[0]);
        let mut y = Vec::with_capacity(xd.len());
        let nf = cst::<T>(f as f64);
        for row in xd.chunks(f.max(1)).take(s[0]) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + cst(eps)).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                y.push(xh * g[j] + bb[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(Tensor::new(&s, y)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Per-channel batch normalization over `[B, C, H, W]`.
    ///
    /// In training mode batch statistics are used and running statistics are
    /// queued for update (see [`Graph::take_buffer_updates`]); otherwise the
    /// running statistics are applied.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        self.expect_rank("batch_norm2d", x, 4)?;
        let s = self.shape(x).to_vec();
        let (batch, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batch_norm2d", &s, self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let n = batch * hw;
        let batch_stats = self.training;
        let mut pending = Vec::new();
        let (mut means, mut vars) = (vec![T::zero(); c], vec![T::zero(); c]);
        if batch_stats {
            if n == 0 {
                return Err(Error::Contract("batch_norm2d on an empty batch".into()));
            }
            for ch in 0..c {
                let mut sum = T::zero();
                for b in 0..batch {
                    sum += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mean = sum / cst(n as f64);
                let mut sq = T::zero();
                for b in 0..batch {
                    for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        sq += (v - mean) * (v - mean);
                    }
                }
                means[ch] = mean;
                vars[ch] = sq / cst(n as f64);
            }
            let rm = self.store.get(running_mean).data();
            let rv = self.store.get(running_var).data();
            let mom = cst::<T>(momentum);
            let unbias = if n > 1 { cst::<T>(n as f64 / (n as f64 - 1.0)) } else { T::one() };
            let new_mean = rm.iter().zip(&means).map(|(&r, &m)| (T::one() - mom) * r + mom * m).collect();
            let new_var = rv.iter().zip(&vars).map(|(&r, &v)| (T::one() - mom) * r + mom * v * unbias).collect();
            pending.push((running_mean, Tensor::new(&[c], new_mean)?));
            pending.push((running_var, Tensor::new(&[c], new_var)?));
        } else {
            means.copy_from_slice(self.store.get(running_mean).data());
            vars.copy_from_slice(self.store.get(running_var).data());
        }
        let rstd: Vec<T> = vars.iter().map(|&v| T::one() / (v + cst(eps)).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xd[i] - means[ch]) * rstd[ch];
                    y[i] = xhat[i] * g[ch] + bt[ch];
                }
            }
        }
        self.buffer_updates.extend(pending);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(&s, y)?,
            Op::BatchNorm2d { x, gamma, beta, xhat, rstd, batch_stats },
            ng,
        ))
    }

    /// Scales each row of `x: [N, D]` to unit Euclidean norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("l2_normalize_rows", x, 2)?;
        let s = self.shape(x).to_vec();
        let d = s[1].max(1);
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(s[0]);
        let mut y = Vec::with_capacity(xd.len());
        for row in xd.chunks(d).take(s[0]) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            for &v in row {
                y.push(if n > T::zero() { v / n } else { T::zero() });
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&s, y)?, Op::L2Normalize { x, norms }, ng))
    }

    /// Softmax cross-entropy of `logits: [N, K]` against class indices.
    ///
    /// With `class_weights`, item `i` contributes `w[target_i] · (-log p_i)`.
    /// `Reduction::Mean` divides the weighted sum by `N`.
    /// With `mask_diagonal`, entry `(i, i)` is excluded from the softmax.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[T]>,
        reduction: Reduction,
        mask_diagonal: bool,
    ) -> Result<Var> {
        self.expect_rank("cross_entropy", logits, 2)?;
        let s = self.shape(logits).to_vec();
        let (n, k) = (s[0], s[1]);
        if targets.len() != n {
            return Err(Error::dim("cross_entropy targets", &s, &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!("target {t} out of range for {k} classes")));
        }
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(Error::dim("cross_entropy weights", &s, &[w.len()]));
            }
        }
        if mask_diagonal && (n != k || targets.iter().enumerate().any(|(i, &t)| t == i)) {
            return Err(Error::Contract("diagonal mask requires square logits and off-diagonal targets".into()));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let live = |j: usize| !(mask_diagonal && j == i);
            let max = (0..k).filter(|&j| live(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in (0..k).filter(|&j| live(j)) {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            let logp = row[targets[i]] - max - z.ln();
            let w = class_weights.map_or(T::one(), |w| w[targets[i]]);
            total -= w * logp;
        }
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::one() / cst((n.max(1)) as f64),
        };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: class_weights.map(<[T]>::to_vec),
                probs,
                scale,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy between `logits` and 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let ld = self.value(logits).data();
        if ld.len() != targets.len() {
            return Err(Error::dim("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let n = cst::<T>(ld.len().max(1) as f64);
        let total: T = ld
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(total / n), Op::BceWithLogits { logits, targets: targets.to_vec() }, ng))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::dim("mse", p.shape(), target.shape()));
        }
        let n = cst::<T>(p.numel().max(1) as f64);
        let total: T = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { pred, target: target.data().to_vec() }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(total), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let total: T = t.data().iter().copied().sum();
        let m = total / cst(t.numel().max(1) as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: Vec::new(),
            inputs: HashMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    let shape = self.value(Var(i)).shape();
                    out.inputs.insert(Var(i), Tensor::new(shape, gy)?);
                }
                Op::Param(id) => {
                    let shape = self.store.get(*id).shape();
                    match out.params.iter_mut().find(|(p, _)| p == id) {
                        Some((_, t)) => {
                            for (a, b) in t.data_mut().iter_mut().zip(&gy) {
                                *a += *b;
                            }
                        }
                        None => out.params.push((*id, Tensor::new(shape, gy)?)),
                    }
                }
                op => self.backward_op(op, Var(i), &gy, &mut grads),
            }
        }
        Ok(out)
    }

    fn backward_op(&self, op: &Op<T>, y: Var, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (batch, inp, out) = (xs[0], ws[0], ws[1]);
                if self.ng(*x) {
                    add_into_with(&mut grads[x.0], batch * inp, |g| {
                        gemm(false, true, batch, inp, out, T::one(), gy, self.value(*w).data(), T::one(), g)
                    });
                }
                if self.ng(*w) {
                    add_into_with(&mut grads[w.0], inp * out, |g| {
                        gemm(true, false, inp, out, batch, T::one(), self.value(*x).data(), gy, T::one(), g)
                    });
                }
                if self.ng(*b) {
                    add_into_with(&mut grads[b.0], out, |g| {
                        for row in gy.chunks(out.max(1)) {
                            for (a, v) in g.iter_mut().zip(row) {
                                *a += *v;
                            }
                        }
                    });
                }
            }
            Op::MatMul { a, b, bt } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *bt { sb[0] } else { sb[1] };
                if self.ng(*a) {
                    add_into_with(&mut grads[a.0], m * k, |g| {
                        gemm(false, !*bt, m, k, n, T::one(), gy, self.value(*b).data(), T::one(), g)
                    });
                }
                if self.ng(*b) {
                    add_into_with(&mut grads[b.0], k * n, |g| {
                        if *bt {
                            gemm(true, false, n, k, m, T::one(), gy, self.value(*a).data(), T::one(), g)
                        } else {
                            gemm(true, false, k, n, m, T::one(), self.value(*a).data(), gy, T::one(), g)
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if self.ng(*b) {
                    add_into(&mut grads[b.0], gy);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if self.ng(*b) {
                    add_into_with(&mut grads[b.0], gy.len(), |g| {
                        for (a, v) in g.iter_mut().zip(gy) {
                            *a -= *v;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.ng(this) {
                        let od = self.value(other).data();
                        add_into_with(&mut grads[this.0], gy.len(), |g| {
                            for ((a, v), o) in g.iter_mut().zip(gy).zip(od) {
                                *a += *v * *o;
                            }
                        });
                    }
                }
            }
            Op::Scale(x, s) => self.elementwise_back(*x, gy, grads, |_, _| *s),
            Op::Gelu(x) => self.elementwise_back(*x, gy, grads, |xv, _| gelu_grad(xv)),
            Op::Relu(x) => self.elementwise_back(*x, gy, grads, |xv, _| relu_grad_mask(xv)),
            Op::Sigmoid(x) => {
                let yd = self.value(y).data();
                add_into_with(&mut grads[x.0], gy.len(), |g| {
                    for ((a, v), s) in g.iter_mut().zip(gy).zip(yd) {
                        *a += *v * *s * (T::one() - *s);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                add_into_with(&mut grads[x.0], gy.len(), |g| {
                    for ((a, v), m) in g.iter_mut().zip(gy).zip(mask) {
                        *a += *v * *m;
                    }
                });
            }
            Op::Conv2d { x, w, b, win } => self.conv2d_back(*x, *w, *b, win, gy, grads),
            Op::ConvTranspose2d { x, w, b, win } => self.conv_t_back(*x, *w, *b, win, gy, grads),
            Op::MaxPool2d { x, argmax } => {
                let len = self.value(*x).numel();
                add_into_with(&mut grads[x.0], len, |g| {
                    for (&idx, v) in argmax.iter().zip(gy) {
                        g[idx] += *v;
                    }
                });
            }
            Op::Upsample2d { x, sh, sw } => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h * sh, w * sw);
                add_into_with(&mut grads[x.0], planes * h * w, |g| {
                    for p in 0..planes {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                g[p * h * w + (oy / sh) * w + ox / sw] += gy[p * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], gy),
            Op::Concat { parts, rows } => {
                if *rows {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        if self.ng(p) {
                            add_into(&mut grads[p.0], &gy[off..off + len]);
                        }
                        off += len;
                    }
                } else {
                    let batch = self.shape(parts[0])[0];
                    let total = self.shape(y)[1];
                    let mut col = 0;
                    for &p in parts {
                        let wdt = self.shape(p)[1];
                        if self.ng(p) {
                            add_into_with(&mut grads[p.0], batch * wdt, |g| {
                                for r in 0..batch {
                                    for j in 0..wdt {
                                        g[r * wdt + j] += gy[r * total + col + j];
                                    }
                                }
                            });
                        }
                        col += wdt;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let f = self.shape(*x)[1];
                let n = rstd.len();
                let g = self.value(*gain).data();
                if self.ng(*gain) {
                    add_into_with(&mut grads[gain.0], f, |acc| {
                        for (i, v) in gy.iter().enumerate() {
                            acc[i % f] += *v * xhat[i];
                        }
                    });
                }
                if self.ng(*bias) {
                    add_into_with(&mut grads[bias.0], f, |acc| {
                        for (i, v) in gy.iter().enumerate() {
                            acc[i % f] += *v;
                        }
                    });
                }
                if self.ng(*x) {
                    let nf = cst::<T>(f as f64);
                    add_into_with(&mut grads[x.0], n * f, |acc| {
                        let mut dxhat = vec![T::zero(); f];
                        for r in 0..n {
                            let row = r * f..(r + 1) * f;
                            for (j, d) in dxhat.iter_mut().enumerate() {
                                *d = gy[r * f + j] * g[j];
                            }
                            let m1 = dxhat.iter().copied().sum::<T>() / nf;
                            let m2 = dxhat.iter().zip(&xhat[row.clone()]).map(|(a, b)| *a * *b).sum::<T>() / nf;
                            for j in 0..f {
                                acc[r * f + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * f + j] * m2);
                            }
                        }
                    });
                }
            }
            Op::BatchNorm2d { x, gamma, beta, xhat, rstd, batch_stats } => {
                let s = self.shape(*x);
                let (batch, c, hw) = (s[0], s[1], s[2] * s[3]);
                let g = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            sum_dy[ch] += gy[i];
                            sum_dy_xhat[ch] += gy[i] * xhat[i];
                        }
                    }
                }
                if self.ng(*gamma) {
                    add_into(&mut grads[gamma.0], &sum_dy_xhat);
                }
                if self.ng(*beta) {
                    add_into(&mut grads[beta.0], &sum_dy);
                }
                if self.ng(*x) {
                    let n = cst::<T>((batch * hw) as f64);
                    add_into_with(&mut grads[x.0], batch * c * hw, |acc| {
                        for b in 0..batch {
                            for ch in 0..c {
                                let off = (b * c + ch) * hw;
                                for i in off..off + hw {
                                    acc[i] += if *batch_stats {
                                        g[ch] * rstd[ch] * (gy[i] - sum_dy[ch] / n - xhat[i] * sum_dy_xhat[ch] / n)
                                    } else {
                                        g[ch] * rstd[ch] * gy[i]
                                    };
                                }
                            }
                        }
                    });
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = self.shape(*x)[1];
                let yd = self.value(y).data();
                add_into_with(&mut grads[x.0], norms.len() * d, |acc| {
                    for (r, &n) in norms.iter().enumerate() {
                        if n <= T::zero() {
                            continue;
                        }
                        let row = r * d..(r + 1) * d;
                        let dot: T = gy[row.clone()].iter().zip(&yd[row.clone()]).map(|(a, b)| *a * *b).sum();
                        for j in row {
                            acc[j] += (gy[j] - yd[j] * dot) / n;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs, scale } => {
                let k = self.shape(*logits)[1];
                let g0 = gy[0] * *scale;
                add_into_with(&mut grads[logits.0], probs.len(), |acc| {
                    for (i, &t) in targets.iter().enumerate() {
                        let w = weights.as_ref().map_or(T::one(), |w| w[t]);
                        for j in 0..k {
                            let ind = if j == t { T::one() } else { T::zero() };
                            acc[i * k + j] += g0 * w * (probs[i * k + j] - ind);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let ld = self.value(*logits).data();
                let n = cst::<T>(ld.len().max(1) as f64);
                add_into_with(&mut grads[logits.0], ld.len(), |acc| {
                    for ((a, &z), &t) in acc.iter_mut().zip(ld).zip(targets) {
                        *a += gy[0] * (sigmoid(z) - t) / n;
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pd = self.value(*pred).data();
                let n = cst::<T>(pd.len().max(1) as f64);
                add_into_with(&mut grads[pred.0], pd.len(), |acc| {
                    for ((a, &p), &t) in acc.iter_mut().zip(pd).zip(target) {
                        *a += gy[0] * cst::<T>(2.0) * (p - t) / n;
                    }
                });
            }
            Op::Sum(x) => {
                let len = self.value(*x).numel();
                add_into_with(&mut grads[x.0], len, |acc| {
                    for a in acc {
                        *a += gy[0];
                    }
                });
            }
            Op::Mean(x) => {
                let len = self.value(*x).numel();
                let share = gy[0] / cst(len.max(1) as f64);
                add_into_with(&mut grads[x.0], len, |acc| {
                    for a in acc {
                        *a += share;
                    }
                });
            }
        }
    }

    fn elementwise_back(&self, x: Var, gy: &[T], grads: &mut [Option<Vec<T>>], d: impl Fn(T, T) -> T) {
        let xd = self.value(x).data();
        add_into_with(&mut grads[x.0], gy.len(), |g| {
            for ((a, v), &xv) in g.iter_mut().zip(gy).zip(xd) {
                *a += *v * d(xv, *v);
            }
        });
    }

    fn conv2d_back(&self, x: Var, w: Var, b: Option<Var>, win: &Window, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let xs = self.shape(x);
        let batch = xs[0];
        let k = self.shape(w)[0];
        let img = win.channels * win.h * win.w;
        let (rows, ncols) = (win.col_rows(), win.col_cols());
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut cols = vec![T::zero(); rows * ncols];
        if let Some(b) = b.filter(|b| self.ng(*b)) {
            add_into_with(&mut grads[b.0], k, |acc| {
                for bi in 0..batch {
                    for (ch, plane) in gy[bi * k * ncols..(bi + 1) * k * ncols].chunks(ncols).enumerate() {
                        acc[ch] += plane.iter().copied().sum::<T>();
                    }
                }
            });
        }
        if self.ng(w) {
            add_into_with(&mut grads[w.0], k * rows, |acc| {
                for bi in 0..batch {
                    win.im2col(&xd[bi * img..(bi + 1) * img], &mut cols);
                    let g = &gy[bi * k * ncols..(bi + 1) * k * ncols];
                    gemm(false, true, k, rows, ncols, T::one(), g, &cols, T::one(), acc);
                }
            });
        }
        if self.ng(x) {
            add_into_with(&mut grads[x.0], batch * img, |acc| {
                for bi in 0..batch {
                    let g = &gy[bi * k * ncols..(bi + 1) * k * ncols];
                    gemm(true, false, rows, ncols, k, T::one(), wd, g, T::zero(), &mut cols);
                    win.col2im(&cols, &mut acc[bi * img..(bi + 1) * img]);
                }
            });
        }
    }

    fn conv_t_back(&self, x: Var, w: Var, b: Option<Var>, win: &Window, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let xs = self.shape(x);
        let (batch, cin) = (xs[0], xs[1]);
        let hw = xs[2] * xs[3];
        let cout = win.channels;
        let out_img = cout * win.h * win.w;
        let rows = win.col_rows();
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        if let Some(b) = b.filter(|b| self.ng(*b)) {
            add_into_with(&mut grads[b.0], cout, |acc| {
                for bi in 0..batch {
                    for (ch, plane) in gy[bi * out_img..(bi + 1) * out_img].chunks(win.h * win.w).enumerate() {
                        acc[ch] += plane.iter().copied().sum::<T>();
                    }
                }
            });
        }
        if !self.ng(x) && !self.ng(w) {
            return;
        }
        let mut gcols = vec![T::zero(); rows * hw];
        let mut gw = self.ng(w).then(|| vec![T::zero(); cin * rows]);
        let mut gx = self.ng(x).then(|| vec![T::zero(); batch * cin * hw]);
        for bi in 0..batch {
            win.im2col(&gy[bi * out_img..(bi + 1) * out_img], &mut gcols);
            if let Some(gx) = gx.as_mut() {
                gemm(false, false, cin, hw, rows, T::one(), wd, &gcols, T::zero(), &mut gx[bi * cin * hw..(bi + 1) * cin * hw]);
            }
            if let Some(gw) = gw.as_mut() {
                gemm(false, true, cin, rows, hw, T::one(), &xd[bi * cin * hw..(bi + 1) * cin * hw], &gcols, T::one(), gw);
            }
        }
        if let Some(gw) = gw {
            add_into(&mut grads[w.0], &gw);
        }
        if let Some(gx) = gx {
            add_into(&mut grads[x.0], &gx);
        }
    }
}
