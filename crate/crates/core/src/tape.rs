//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and the recipe
//! needed to propagate gradients back to its inputs. [`Tape::backward`]
//! consumes the tape and returns the gradients of all leaves that were
//! registered with `requires_grad`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use num_traits::Float;

use crate::error::{invalid, mismatch, Error, Result};
use crate::kernels::{self, AxisPlan, ConvGeom};
use crate::real::{gemm, Layout, Real};
use crate::tensor::{broadcast_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operation selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Abs,
    Square,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul)
    }
}

impl FromStr for ElementwiseOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => ElementwiseOp::Add,
            "sub" => ElementwiseOp::Sub,
            "mul" => ElementwiseOp::Mul,
            "relu" => ElementwiseOp::Relu,
            "sigmoid" => ElementwiseOp::Sigmoid,
            "abs" => ElementwiseOp::Abs,
            "square" => ElementwiseOp::Square,
            other => return Err(invalid("elementwise", format!("unknown op kind `{other}`"))),
        })
    }
}

/// Resampling kernel for [`Tape::interpolate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Nearest,
    Bilinear,
}

impl FromStr for Resize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Resize::Nearest),
            "bilinear" => Ok(Resize::Bilinear),
            other => Err(Error::Config(format!("unknown resize mode `{other}`"))),
        }
    }
}

impl Resize {
    pub fn as_str(self) -> &'static str {
        match self {
            Resize::Nearest => "nearest",
            Resize::Bilinear => "bilinear",
        }
    }
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Batch-norm mode: training normalizes with batch statistics and updates
/// the running estimate; evaluation uses the running estimate.
pub enum BatchNormMode<'a, T> {
    Train(&'a mut RunningStats<T>),
    Eval(&'a RunningStats<T>),
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    MatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Concat(Var, Var),
    Resample {
        x: Var,
        py: AxisPlan<T>,
        px: AxisPlan<T>,
    },
    GlobalAvgPool(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::MatMul(..) => "matmul",
            Op::TransposeLast2(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Concat(..) => "concat_channels",
            Op::Resample { .. } => "interpolate",
            Op::GlobalAvgPool(_) => "global_avg_pool",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations. Single-threaded; use one tape per
/// thread for data-parallel work.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name(), node });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(node))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input tensor. Gradients are returned for leaves created with
    /// `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    // ---- element-wise -------------------------------------------------

    /// Dispatches a unary or binary element-wise operation.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Add, Some(b)) => self.add(a, b),
            (ElementwiseOp::Sub, Some(b)) => self.sub(a, b),
            (ElementwiseOp::Mul, Some(b)) => self.mul(a, b),
            (ElementwiseOp::Relu, None) => self.relu(a),
            (ElementwiseOp::Sigmoid, None) => self.sigmoid(a),
            (ElementwiseOp::Abs, None) => self.abs(a),
            (ElementwiseOp::Square, None) => self.square(a),
            (op, _) => Err(invalid(
                "elementwise",
                format!("{op:?} takes {} operand(s)", if op.is_binary() { 2 } else { 1 }),
            )),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let out = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out4 = [1; 4];
            out4[4 - shape.len()..].copy_from_slice(&shape);
            let sa = kernels::broadcast_strides(ta.shape(), &out4);
            let sb = kernels::broadcast_strides(tb.shape(), &out4);
            let (da, db) = (ta.data(), tb.data());
            let mut out = vec![T::zero(); out4.iter().product()];
            kernels::for_each_broadcast(&out4, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        Ok((Tensor::new(&shape, out)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let t = self.nodes[a.0].value.map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all elements, as a shape-[1] tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    // ---- linear algebra -----------------------------------------------

    /// Matrix product of `[.., N, K]` and `[.., K, M]` with equal leading
    /// (batch) extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let r = sa.len();
        let (n, k, k2, m) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * n * m];
        {
            let (ta, tb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
            for i in 0..batch {
                gemm(
                    n,
                    k,
                    m,
                    T::one(),
                    &ta[i * n * k..(i + 1) * n * k],
                    Layout::row(k),
                    &tb[i * k * m..(i + 1) * k * m],
                    Layout::row(m),
                    T::zero(),
                    &mut out[i * n * m..(i + 1) * n * m],
                    Layout::row(m),
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend_from_slice(&[n, m]);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(invalid("transpose", "needs rank ≥ 2"));
        }
        let r = s.len();
        let (n, m) = (s[r - 2], s[r - 1]);
        let out = transpose_last2(self.nodes[a.0].value.data(), n, m);
        let mut shape = s.clone();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&shape, out)?, Op::TransposeLast2(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let n = *t.shape().last().unwrap();
        let out = kernels::softmax_rows(t.data(), n);
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&shape, out)?, Op::SoftmaxRows(a), rg)
    }

    // ---- convolution ----------------------------------------------------

    /// Cross-correlation of `x` (B×Cin×H×W) with `w` (Cout×Cin×k×k).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (bn, cin, h, wd) = self.nodes[x.0].value.nchw("conv2d")?;
        let (cout, wc, kh, kw) = self.nodes[w.0].value.nchw("conv2d")?;
        if wc != cin || kh != kw {
            return Err(mismatch("conv2d", self.shape(x), self.shape(w)));
        }
        if !(1..=3).contains(&kh) {
            return Err(invalid("conv2d", format!("kernel must be 1, 2 or 3, got {kh}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv2d", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, kh, stride, padding).ok_or_else(|| {
            invalid(
                "conv2d",
                format!("output extent of {h}×{wd} with k={kh} stride={stride} padding={padding} is not a positive integer"),
            )
        })?;
        let out = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            bn,
            &geom,
            self.nodes[w.0].value.data(),
            cout,
            b.map(|b| self.nodes[b.0].value.data()),
        );
        let t = Tensor::new(&[bn, cout, geom.oh, geom.ow], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(t, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Transposed convolution (zero padding) of `x` (B×Cin×h×w) with `w`
    /// (Cin×Cout×k×k); output extents are `(h−1)·stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (bn, cin, h, wd) = self.nodes[x.0].value.nchw("conv_transpose2d")?;
        let (wc, cout, kh, kw) = self.nodes[w.0].value.nchw("conv_transpose2d")?;
        if wc != cin || kh != kw {
            return Err(mismatch("conv_transpose2d", self.shape(x), self.shape(w)));
        }
        if stride == 0 {
            return Err(invalid("conv_transpose2d", "stride must be ≥ 1"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv_transpose2d", self.shape(b), &[cout]));
            }
        }
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        let geom = ConvGeom::new(cout, oh, ow, kh, stride, 0).expect("transposed geometry is always valid");
        let out = kernels::conv_transpose_forward(
            self.nodes[x.0].value.data(),
            bn,
            cin,
            &geom,
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
        );
        let t = Tensor::new(&[bn, cout, oh, ow], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(t, Op::ConvTranspose2d { x, w, b, geom }, rg)
    }

    /// 2×2 max pooling, stride 2.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.nodes[x.0].value.nchw("maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("maxpool2", format!("extents must be even, got {h}×{w}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.nodes[x.0].value.data(), b * c, h, w);
        let t = Tensor::new(&[b, c, h / 2, w / 2], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Per-channel batch normalization (epsilon 1e-5, momentum 0.1).
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_, T>) -> Result<Var> {
        let (b, c, h, w) = self.nodes[x.0].value.nchw("batchnorm2d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batchnorm2d", self.shape(gamma), &[c]));
        }
        let hw = h * w;
        let eps = BN_EPS;
        let (mean, inv_std, batch_stats) = match mode {
            BatchNormMode::Train(running) => {
                if running.mean.len() != c {
                    return Err(mismatch("batchnorm2d", &[running.mean.len()], &[c]));
                }
                let (mean, var) = kernels::channel_stats(self.nodes[x.0].value.data(), b, c, hw);
                let n = (b * hw) as f64;
                let m = BN_MOMENTUM;
                for ch in 0..c {
                    let unbiased = if n > 1.0 { var[ch] * n / (n - 1.0) } else { var[ch] };
                    running.mean[ch] = T::from_f64((1.0 - m) * running.mean[ch].as_f64() + m * mean[ch]);
                    running.var[ch] = T::from_f64((1.0 - m) * running.var[ch].as_f64() + m * unbiased);
                }
                let inv: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / Float::sqrt(v + eps))).collect();
                (mean.iter().map(|&v| T::from_f64(v)).collect::<Vec<T>>(), inv, true)
            }
            BatchNormMode::Eval(running) => {
                if running.mean.len() != c {
                    return Err(mismatch("batchnorm2d", &[running.mean.len()], &[c]));
                }
                let inv = running
                    .var
                    .iter()
                    .map(|v| T::from_f64(1.0 / Float::sqrt(v.as_f64() + eps)))
                    .collect();
                (running.mean.clone(), inv, false)
            }
        };
        let xd = self.nodes[x.0].value.data();
        let (g, bt) = (self.nodes[gamma.0].value.data(), self.nodes[beta.0].value.data());
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                let (mu, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for i in base..base + hw {
                    out[i] = gg * (xd[i] - mu) * is + bb;
                }
            }
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    /// Concatenates two B×C×H×W tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.nodes[a.0].value.nchw("concat_channels")?;
        let (bb, cb, hb, wb) = self.nodes[b.0].value.nchw("concat_channels")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(mismatch("concat_channels", self.shape(a), self.shape(b)));
        }
        let hw = ha * wa;
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for bi in 0..ba {
            out.extend_from_slice(&da[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&db[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let t = Tensor::new(&[ba, ca + cb, ha, wa], out)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Concat(a, b), rg)
    }

    /// Spatial resize of a B×C×H×W tensor. Bilinear uses the half-pixel
    /// (align_corners = false) convention.
    pub fn interpolate(&mut self, x: Var, out_h: usize, out_w: usize, mode: Resize) -> Result<Var> {
        let (b, c, h, w) = self.nodes[x.0].value.nchw("interpolate")?;
        if out_h == 0 || out_w == 0 {
            return Err(invalid("interpolate", "target extents must be positive"));
        }
        let (py, px) = match mode {
            Resize::Nearest => (kernels::nearest_plan(h, out_h), kernels::nearest_plan(w, out_w)),
            Resize::Bilinear => (kernels::linear_plan(h, out_h), kernels::linear_plan(w, out_w)),
        };
        let out = kernels::resample_forward(self.nodes[x.0].value.data(), b * c, (h, w), &py, &px);
        let t = Tensor::new(&[b, c, out_h, out_w], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Resample { x, py, px }, rg)
    }

    /// Spatial mean per channel: B×C×H×W → B×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.nodes[x.0].value.nchw("global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::from_f64(hw as f64);
        let out = self.nodes[x.0]
            .value
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(&[b, c], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::GlobalAvgPool(x), rg)
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape, consuming it.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut nodes = self.nodes;
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let g = grads[i].take();
            if let (Some(g), true) = (g, nodes[i].requires_grad) {
                let node = &nodes[i];
                if let Op::Leaf = node.op {
                    leaves[i] = Some(Tensor::new(node.value.shape(), g)?);
                } else {
                    propagate(&nodes, i, g, &mut grads);
                }
            }
            // Later nodes are done, so nothing reads this value again.
            nodes[i].value = Tensor::scalar(T::zero());
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Gradients of the leaves of a consumed tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf; `None` if the leaf did not require grad or is
    /// unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn transpose_last2<T: Real>(d: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d.len()];
    for (blk, ob) in d.chunks(n * m).zip(out.chunks_mut(n * m)) {
        for i in 0..n {
            for j in 0..m {
                ob[j * n + i] = blk[i * m + j];
            }
        }
    }
    out
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast-shaped gradient back onto an operand's shape.
fn reduce_to<T: Real>(g: &[T], out_shape: &[usize], shape: &[usize], scale: Option<(&[T], &[usize])>) -> Vec<T> {
    let mut out4 = [1; 4];
    out4[4 - out_shape.len()..].copy_from_slice(out_shape);
    let s_self = kernels::broadcast_strides(shape, &out4);
    let n: usize = shape.iter().product();
    let mut r = vec![T::zero(); n];
    match scale {
        None => kernels::for_each_broadcast(&out4, &s_self, &s_self, |o, i, _| r[i] += g[o]),
        Some((other, oshape)) => {
            let s_other = kernels::broadcast_strides(oshape, &out4);
            kernels::for_each_broadcast(&out4, &s_self, &s_other, |o, i, j| r[i] += g[o] * other[j]);
        }
    }
    r
}

fn propagate<T: Real>(nodes: &[Node<T>], i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let neg = matches!(node.op, Op::Sub(..));
            for (v, sign) in [(*a, false), (*b, neg)] {
                if !rg(v) {
                    continue;
                }
                let mut r = if val(v).shape() == out_shape {
                    g.clone()
                } else {
                    reduce_to(&g, out_shape, val(v).shape(), None)
                };
                if sign {
                    r.iter_mut().for_each(|x| *x = -*x);
                }
                accumulate(nodes, grads, v, r);
            }
        }
        Op::Mul(a, b) => {
            for (v, o) in [(*a, *b), (*b, *a)] {
                if !rg(v) {
                    continue;
                }
                let (tv, to) = (val(v), val(o));
                let r = if tv.shape() == out_shape && to.shape() == out_shape {
                    g.iter().zip(to.data()).map(|(&x, &y)| x * y).collect()
                } else {
                    reduce_to(&g, out_shape, tv.shape(), Some((to.data(), to.shape())))
                };
                accumulate(nodes, grads, v, r);
            }
        }
        Op::Scale(a, c) => {
            let r = g.iter().map(|&x| x * *c).collect();
            accumulate(nodes, grads, *a, r);
        }
        Op::Relu(a) => {
            let r = g
                .iter()
                .zip(val(*a).data())
                .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *a, r);
        }
        Op::Sigmoid(a) => {
            let r = g
                .iter()
                .zip(node.value.data())
                .map(|(&d, &y)| d * y * (T::one() - y))
                .collect();
            accumulate(nodes, grads, *a, r);
        }
        Op::Abs(a) => {
            let r = g
                .iter()
                .zip(val(*a).data())
                .map(|(&d, &x)| {
                    if x > T::zero() {
                        d
                    } else if x < T::zero() {
                        -d
                    } else {
                        T::zero()
                    }
                })
                .collect();
            accumulate(nodes, grads, *a, r);
        }
        Op::Square(a) => {
            let two = T::from_f64(2.0);
            let r = g.iter().zip(val(*a).data()).map(|(&d, &x)| two * x * d).collect();
            accumulate(nodes, grads, *a, r);
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, vec![g[0]; val(*a).len()]);
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let r = sa.len();
            let (n, k, m) = (sa[r - 2], sa[r - 1], sb[r - 1]);
            let batch: usize = sa[..r - 2].iter().product();
            if rg(*a) {
                let bd = val(*b).data();
                let mut da = vec![T::zero(); batch * n * k];
                for t in 0..batch {
                    gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        &g[t * n * m..(t + 1) * n * m],
                        Layout::row(m),
                        &bd[t * k * m..(t + 1) * k * m],
                        Layout::trans(m),
                        T::zero(),
                        &mut da[t * n * k..(t + 1) * n * k],
                        Layout::row(k),
                    );
                }
                accumulate(nodes, grads, *a, da);
            }
            if rg(*b) {
                let ad = val(*a).data();
                let mut db = vec![T::zero(); batch * k * m];
                for t in 0..batch {
                    gemm(
                        k,
                        n,
                        m,
                        T::one(),
                        &ad[t * n * k..(t + 1) * n * k],
                        Layout::trans(k),
                        &g[t * n * m..(t + 1) * n * m],
                        Layout::row(m),
                        T::zero(),
                        &mut db[t * k * m..(t + 1) * k * m],
                        Layout::row(m),
                    );
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::TransposeLast2(a) => {
            let s = out_shape;
            let r = s.len();
            accumulate(nodes, grads, *a, transpose_last2(&g, s[r - 2], s[r - 1]));
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g),
        Op::SoftmaxRows(a) => {
            let n = *out_shape.last().unwrap();
            let y = node.value.data();
            let mut r = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                r.extend(gr.iter().zip(yr).map(|(&d, &p)| p * (d - dot)));
            }
            accumulate(nodes, grads, *a, r);
        }
        Op::Conv2d { x, w, b, geom } => {
            let batch = val(*x).shape()[0];
            let cout = val(*w).shape()[0];
            let need = [rg(*x), rg(*w), b.is_some_and(rg)];
            let (dx, dw, db) = kernels::conv2d_backward(val(*x).data(), batch, geom, val(*w).data(), cout, &g, need);
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, dw);
            }
            if let (Some(db), Some(b)) = (db, b) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let (batch, cin) = (val(*x).shape()[0], val(*x).shape()[1]);
            let need = [rg(*x), rg(*w), b.is_some_and(rg)];
            let (dx, dw, db) =
                kernels::conv_transpose_backward(val(*x).data(), batch, cin, geom, val(*w).data(), &g, need);
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, dw);
            }
            if let (Some(db), Some(b)) = (db, b) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let mut dx = vec![T::zero(); val(*x).len()];
            for (&d, &j) in g.iter().zip(argmax) {
                dx[j as usize] += d;
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            batch_stats,
        } => {
            let (b, c, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
            let hw = h * w;
            let xd = val(*x).data();
            let gm = val(*gamma).data();
            let mut sum_dy = vec![0.0f64; c];
            let mut sum_dy_xhat = vec![0.0f64; c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in base..base + hw {
                        let d = g[j].as_f64();
                        s1 += d;
                        s2 += d * ((xd[j] - mu) * is).as_f64();
                    }
                    sum_dy[ch] += s1;
                    sum_dy_xhat[ch] += s2;
                }
            }
            if rg(*gamma) {
                accumulate(nodes, grads, *gamma, sum_dy_xhat.iter().map(|&v| T::from_f64(v)).collect());
            }
            if rg(*beta) {
                accumulate(nodes, grads, *beta, sum_dy.iter().map(|&v| T::from_f64(v)).collect());
            }
            if rg(*x) {
                let m = (b * hw) as f64;
                let mut dx = vec![T::zero(); xd.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        let (mu, is, gg) = (mean[ch], inv_std[ch], gm[ch]);
                        let k = gg * is;
                        if *batch_stats {
                            let m1 = T::from_f64(sum_dy[ch] / m);
                            let m2 = T::from_f64(sum_dy_xhat[ch] / m);
                            for j in base..base + hw {
                                let xhat = (xd[j] - mu) * is;
                                dx[j] = k * (g[j] - m1 - xhat * m2);
                            }
                        } else {
                            for j in base..base + hw {
                                dx[j] = k * g[j];
                            }
                        }
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::Concat(a, b) => {
            let (bn, ca) = (val(*a).shape()[0], val(*a).shape()[1]);
            let cb = val(*b).shape()[1];
            let hw = out_shape[2] * out_shape[3];
            let mut ga = Vec::with_capacity(bn * ca * hw);
            let mut gb = Vec::with_capacity(bn * cb * hw);
            for blk in g.chunks((ca + cb) * hw) {
                ga.extend_from_slice(&blk[..ca * hw]);
                gb.extend_from_slice(&blk[ca * hw..]);
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Resample { x, py, px } => {
            let s = val(*x).shape();
            let dx = kernels::resample_backward(&g, s[0] * s[1], (s[2], s[3]), py, px);
            accumulate(nodes, grads, *x, dx);
        }
        Op::GlobalAvgPool(x) => {
            let s = val(*x).shape();
            let hw = s[2] * s[3];
            let inv = T::one() / T::from_f64(hw as f64);
            let mut dx = Vec::with_capacity(val(*x).len());
            for &d in &g {
                dx.extend(core::iter::repeat_n(d * inv, hw));
            }
            accumulate(nodes, grads, *x, dx);
        }
    }
}

/// Splits a B×C×H×W tensor into its first `c_first` channels and the rest.
pub fn split_channels<T: Real>(t: &Tensor<T>, c_first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = t.nchw("split_channels")?;
    if c_first == 0 || c_first >= c {
        return Err(invalid("split_channels", "split point must be inside the channel range"));
    }
    let hw = h * w;
    let mut a = Vec::with_capacity(b * c_first * hw);
    let mut r = Vec::with_capacity(b * (c - c_first) * hw);
    for blk in t.data().chunks(c * hw) {
        a.extend_from_slice(&blk[..c_first * hw]);
        r.extend_from_slice(&blk[c_first * hw..]);
    }
    Ok((Tensor::new(&[b, c_first, h, w], a)?, Tensor::new(&[b, c - c_first, h, w], r)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, probe, random_tensor};
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    /// Direct nested-loop cross-correlation.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, cin, h, wd) = x.nchw("o").unwrap();
        let (cout, _, k, _) = w.nchw("o").unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                                    s += xv * wv;
                                }
                            }
                        }
                        out[((bi * cout + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        Tensor::new(&[b, cout, oh, ow], out).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let r = tp.relu(x).unwrap();
        assert_eq!(tp.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tp.constant(t(&[1], &[0.0])).unwrap();
        let s = tp.sigmoid(z).unwrap();
        assert_eq!(tp.value(s).data(), &[0.5]);
    }

    #[test]
    fn broadcast_add_matches_loop() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[2, 1], &[1.0, 2.0])).unwrap();
        let b = tp.constant(t(&[1, 2], &[10.0, 20.0])).unwrap();
        let c = tp.add(a, b).unwrap();
        let mut oracle = vec![];
        for i in 0..2 {
            for j in 0..2 {
                oracle.push([1.0, 2.0][i] + [10.0, 20.0][j]);
            }
        }
        assert_eq!(oracle, vec![11.0, 21.0, 12.0, 22.0]);
        assert_eq!(tp.value(c).data(), &oracle[..]);
        assert_eq!(tp.shape(c), &[2, 2]);
    }

    #[test]
    fn elementwise_errors() {
        assert!("tanh".parse::<ElementwiseOp>().is_err());
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = tp.constant(t(&[3, 2], &[0.0; 6])).unwrap();
        assert!(matches!(tp.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(tp.elementwise(ElementwiseOp::Relu, a, Some(b)).is_err());
        let op: ElementwiseOp = "mul".parse().unwrap();
        let a2 = tp.constant(t(&[2, 3], &[2.0; 6])).unwrap();
        let m = tp.elementwise(op, a2, Some(a2)).unwrap();
        assert_eq!(tp.value(m).data(), &[4.0; 6]);
    }

    #[test]
    fn matmul_values_and_errors() {
        let mut tp = Tape::new();
        let i = tp.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tp.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let p = tp.matmul(i, m).unwrap();
        assert_eq!(tp.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = tp.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let c = tp.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
        let d = tp.matmul(r, c).unwrap();
        assert_eq!(tp.value(d).data(), &[11.0]);
        assert!(tp.matmul(r, r).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = random_tensor(&[3, 4], 1, -1.0, 1.0);
        let b = random_tensor(&[4, 2], 2, -1.0, 1.0);
        let err = check_inputs(
            |tp, v| {
                let y = tp.matmul(v[0], v[1])?;
                probe(tp, y, 3)
            },
            &[a, b],
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn conv2d_identity_and_ones() {
        let x = random_tensor(&[1, 1, 3, 5], 4, -1.0, 1.0);
        let mut tp = Tape::new();
        let xv = tp.constant(x.clone()).unwrap();
        let w = tp.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let b = tp.constant(t(&[1], &[0.0])).unwrap();
        let y = tp.conv2d(xv, w, Some(b), 1, 0).unwrap();
        assert_eq!(tp.value(y), &x);

        let ones = t(&[1, 1, 3, 3], &[1.0; 9]);
        let k = t(&[1, 1, 3, 3], &[1.0; 9]);
        let expected = conv_oracle(&ones, &k, 1, 1);
        assert_eq!(expected.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        let xv = tp.constant(ones).unwrap();
        let kv = tp.constant(k).unwrap();
        let y = tp.conv2d(xv, kv, None, 1, 1).unwrap();
        assert_eq!(tp.value(y), &expected);
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        for (i, &(shape, wshape, stride, pad)) in [
            ([2, 3, 7, 9], [4, 3, 3, 3], 1, 1),
            ([2, 3, 7, 9], [7, 3, 3, 3], 1, 1),
            ([1, 2, 9, 9], [3, 2, 3, 3], 2, 1),
            ([2, 5, 4, 6], [2, 5, 1, 1], 1, 0),
            ([1, 2, 5, 7], [2, 2, 3, 3], 1, 0),
        ]
        .iter()
        .enumerate()
        {
            let x = random_tensor(&shape, 10 + i as u64, -1.0, 1.0);
            let w = random_tensor(&wshape, 20 + i as u64, -1.0, 1.0);
            let mut tp = Tape::new();
            let (xv, wv) = (tp.constant(x.clone()).unwrap(), tp.constant(w.clone()).unwrap());
            let y = tp.conv2d(xv, wv, None, stride, pad).unwrap();
            let o = conv_oracle(&x, &w, stride, pad);
            assert_eq!(tp.shape(y), o.shape());
            assert!(tp.value(y).max_abs_diff(&o) < 1e-12);
        }
    }

    #[test]
    fn conv2d_rejects_fractional_extent() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::zeros(&[1, 1, 4, 4]).unwrap()).unwrap();
        let w = tp.constant(Tensor::zeros(&[1, 1, 3, 3]).unwrap()).unwrap();
        assert!(tp.conv2d(x, w, None, 2, 1).is_err());
        let w5 = tp.constant(Tensor::zeros(&[1, 1, 5, 5]).unwrap()).unwrap();
        assert!(tp.conv2d(x, w5, None, 1, 2).is_err());
    }

    #[test]
    fn conv2d_gradient_on_1x2x4x4() {
        let x = random_tensor(&[1, 2, 4, 4], 30, -1.0, 1.0);
        let w = random_tensor(&[3, 2, 3, 3], 31, -1.0, 1.0);
        let b = random_tensor(&[3], 32, -1.0, 1.0);
        let err = check_inputs(
            |tp, v| {
                let y = tp.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                probe(tp, y, 33)
            },
            &[x, w, b],
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn conv_transpose_single_pixel_stamp() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let w = tp.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tp.conv_transpose2d(x, w, None, 2).unwrap();
        assert_eq!(tp.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tp.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad = tp.constant(t(&[2, 1, 2, 2], &[0.0; 8])).unwrap();
        assert!(tp.conv_transpose2d(x, bad, None, 2).is_err());
    }

    #[test]
    fn conv_transpose_doubles_extents() {
        let mut tp = Tape::new();
        let x = tp.constant(random_tensor(&[2, 4, 3, 5], 1, -1.0, 1.0)).unwrap();
        let w = tp.constant(random_tensor(&[4, 6, 2, 2], 2, -1.0, 1.0)).unwrap();
        let y = tp.conv_transpose2d(x, w, None, 2).unwrap();
        assert_eq!(tp.shape(y), &[2, 6, 6, 10]);
    }

    fn adjoint_gap(seed: u64, xs: [usize; 4], cout: usize, k: usize, stride: usize) -> (f64, f64) {
        // conv2d: x (B×Cin×H×W) → y; convT maps y-shaped tensors back to x's shape.
        let [b, cin, h, w] = xs;
        let x = random_tensor(&xs, seed, -1.0, 1.0);
        let wt = random_tensor(&[cout, cin, k, k], seed + 1, -1.0, 1.0);
        let mut tp = Tape::new();
        let (xv, wv) = (tp.constant(x.clone()).unwrap(), tp.constant(wt).unwrap());
        let cx = tp.conv2d(xv, wv, None, stride, 0).unwrap();
        let ys = tp.shape(cx).to_vec();
        let y = random_tensor(&ys, seed + 2, -1.0, 1.0);
        let yv = tp.constant(y.clone()).unwrap();
        let ty = tp.conv_transpose2d(yv, wv, None, stride).unwrap();
        assert_eq!(tp.shape(ty), &[b, cin, h, w]);
        let lhs = tp.value(cx).dot(&y);
        let rhs = x.dot(tp.value(ty));
        let norms = (tp.value(cx).dot(tp.value(cx)) * y.dot(&y)).sqrt() + (x.dot(&x) * tp.value(ty).dot(tp.value(ty))).sqrt();
        ((lhs - rhs).abs(), norms)
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        for (i, (xs, cout, k, s)) in [([1, 2, 4, 4], 3, 2, 2), ([2, 3, 7, 5], 2, 3, 2), ([1, 1, 5, 5], 2, 3, 1)]
            .into_iter()
            .enumerate()
        {
            let (gap, norms) = adjoint_gap(100 + i as u64 * 7, xs, cout, k, s);
            assert!(gap < 1e-9 * norms, "{gap} vs {norms}");
        }
    }

    #[test]
    fn maxpool_values_ties_and_errors() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tp.maxpool2(x).unwrap();
        assert_eq!(tp.value(y).data(), &[4.0]);
        let c = tp.constant(Tensor::full(&[1, 2, 4, 6], 3.5).unwrap()).unwrap();
        let y = tp.maxpool2(c).unwrap();
        assert_eq!(tp.value(y), &Tensor::full(&[1, 2, 2, 3], 3.5).unwrap());
        let odd = tp.constant(Tensor::zeros(&[1, 1, 3, 4]).unwrap()).unwrap();
        assert!(tp.maxpool2(odd).is_err());

        let mut tp = Tape::new();
        let x = tp.param(t(&[1, 1, 2, 2], &[5.0; 4])).unwrap();
        let y = tp.maxpool2(x).unwrap();
        let l = tp.sum(y).unwrap();
        let g = tp.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[3, 2], &[0.0, 0.0, 1000.0, 1000.0, 0.0, 3f64.ln()])).unwrap();
        let y = tp.softmax_rows(x).unwrap();
        let d = tp.value(y).data();
        assert_eq!(&d[..4], &[0.5; 4]);
        assert!((d[4] - 0.25).abs() < 1e-15 && (d[5] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let x = random_tensor(&[4, 3, 5, 5], 9, -3.0, 7.0);
        let mut tp = Tape::new();
        let xv = tp.constant(x).unwrap();
        let g = tp.constant(Tensor::ones(&[3]).unwrap()).unwrap();
        let b = tp.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
        let mut rs = RunningStats::new(3);
        let y = tp.batchnorm2d(xv, g, b, BatchNormMode::Train(&mut rs)).unwrap();
        let stats = channel_moments(tp.value(y));
        for (m, v) in stats {
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
        // running stats moved 10% towards the batch statistics
        assert!(rs.mean.iter().all(|&m| m != 0.0));

        let g2 = tp.constant(Tensor::full(&[3], 2.0).unwrap()).unwrap();
        let b2 = tp.constant(Tensor::full(&[3], 3.0).unwrap()).unwrap();
        let y2 = tp.batchnorm2d(y, g2, b2, BatchNormMode::Train(&mut rs)).unwrap();
        for (m, v) in channel_moments(tp.value(y2)) {
            assert!((m - 3.0).abs() < 1e-5);
            assert!((v.sqrt() - 2.0).abs() < 1e-3);
        }
    }

    fn channel_moments(t: &Tensor<f64>) -> Vec<(f64, f64)> {
        let (b, c, h, w) = t.nchw("m").unwrap();
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..b)
                    .flat_map(|bi| t.data()[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w].to_vec())
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_and_gradient_matches() {
        let rs = RunningStats {
            mean: vec![1.0, -1.0],
            var: vec![4.0, 0.25],
        };
        let mut tp = Tape::new();
        let x = tp.constant(t(&[1, 2, 1, 1], &[3.0, 0.0])).unwrap();
        let g = tp.constant(Tensor::ones(&[2]).unwrap()).unwrap();
        let b = tp.constant(Tensor::zeros(&[2]).unwrap()).unwrap();
        let y = tp.batchnorm2d(x, g, b, BatchNormMode::Eval(&rs)).unwrap();
        let d = tp.value(y).data();
        assert!((d[0] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert!((d[1] - 1.0 / (0.25f64 + 1e-5).sqrt()).abs() < 1e-12);

        let x = random_tensor(&[2, 3, 2, 2], 40, -1.0, 1.0);
        let gm = random_tensor(&[3], 41, 0.5, 1.5);
        let bt = random_tensor(&[3], 42, -1.0, 1.0);
        let err = check_inputs(
            |tp, v| {
                let mut rs = RunningStats::new(3);
                let y = tp.batchnorm2d(v[0], v[1], v[2], BatchNormMode::Train(&mut rs))?;
                probe(tp, y, 43)
            },
            &[x, gm, bt],
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn concat_then_split_and_gradient() {
        let mut tp = Tape::new();
        let a = tp.param(random_tensor(&[2, 3, 4, 4], 1, -1.0, 1.0)).unwrap();
        let d = tp.param(random_tensor(&[2, 1, 4, 4], 2, -1.0, 1.0)).unwrap();
        let v = tp.param(random_tensor(&[2, 1, 4, 4], 3, -1.0, 1.0)).unwrap();
        let ad = tp.concat_channels(a, d).unwrap();
        let x = tp.concat_channels(ad, v).unwrap();
        assert_eq!(tp.shape(x), &[2, 5, 4, 4]);
        let (l, r) = split_channels(tp.value(x), 4).unwrap();
        assert_eq!(&r, tp.value(v));
        let (l2, r2) = split_channels(&l, 3).unwrap();
        assert_eq!(&l2, tp.value(a));
        assert_eq!(&r2, tp.value(d));
        let bad = tp.constant(Tensor::zeros(&[2, 1, 4, 5]).unwrap()).unwrap();
        assert!(tp.concat_channels(a, bad).is_err());
        let s = tp.sum(x).unwrap();
        let g = tp.backward(s).unwrap();
        for var in [a, d, v] {
            assert!(g.get(var).unwrap().data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn interpolate_examples() {
        let mut tp = Tape::new();
        let x = tp.constant(random_tensor(&[1, 2, 3, 5], 5, -1.0, 1.0)).unwrap();
        for mode in [Resize::Nearest, Resize::Bilinear] {
            let y = tp.interpolate(x, 3, 5, mode).unwrap();
            assert_eq!(tp.value(y), tp.value(x));
        }
        let m = tp.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tp.interpolate(m, 4, 4, Resize::Nearest).unwrap();
        #[rustfmt::skip]
        let expect = [1.0, 1.0, 2.0, 2.0,
                      1.0, 1.0, 2.0, 2.0,
                      3.0, 3.0, 4.0, 4.0,
                      3.0, 3.0, 4.0, 4.0];
        assert_eq!(tp.value(y).data(), &expect);
        let r = tp.constant(t(&[1, 1, 1, 2], &[0.0, 1.0])).unwrap();
        let y = tp.interpolate(r, 1, 4, Resize::Bilinear).unwrap();
        assert_eq!(tp.value(y).data(), &[0.0, 0.25, 0.75, 1.0]);
        assert!(tp.interpolate(r, 0, 4, Resize::Bilinear).is_err());
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tp = Tape::new();
        let c = tp.constant(Tensor::full(&[2, 3, 4, 4], 7.0).unwrap()).unwrap();
        let y = tp.global_avg_pool(c).unwrap();
        assert_eq!(tp.value(y).data(), &[7.0; 6]);
        let x = tp.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tp.global_avg_pool(x).unwrap();
        assert_eq!(tp.value(y).data(), &[2.5]);
        let x = random_tensor(&[2, 3, 3, 4], 50, -1.0, 1.0);
        let err = check_inputs(
            |tp, v| {
                let y = tp.global_avg_pool(v[0])?;
                probe(tp, y, 51)
            },
            &[x],
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_contract() {
        let tp = Tape::<f64>::new();
        assert!(matches!(tp.backward(Var(0)), Err(Error::EmptyTape)));

        let mut tp = Tape::new();
        let x = tp.param(t(&[3], &[1.0, -2.0, 3.0])).unwrap();
        let y = tp.relu(x).unwrap();
        assert!(matches!(tp.backward(y), Err(Error::NonScalarLoss(_))));

        let mut tp = Tape::new();
        let x = tp.param(t(&[3], &[1.0, -2.0, 3.0])).unwrap();
        let s = tp.sum(x).unwrap();
        assert_eq!(tp.backward(s).unwrap().get(x).unwrap().data(), &[1.0; 3]);

        let mut tp = Tape::new();
        let x = tp.param(t(&[3], &[1.0, -2.0, 3.0])).unwrap();
        let c = tp.constant(t(&[3], &[1.0; 3])).unwrap();
        let sq = tp.square(x).unwrap();
        let s = tp.sum(sq).unwrap();
        let g = tp.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_finite_values_are_rejected_with_op_name() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[1], &[1e300])).unwrap();
        let err = tp.square(x).unwrap_err();
        assert_eq!(err, Error::NonFinite { op: "square", node: 1 });
        assert!(tp.leaf(t(&[1], &[f64::NAN]), false).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tp = Tape::new();
            let x = tp.constant(random_tensor(&[2, 3, 8, 8], 7, -1.0, 1.0)).unwrap();
            let w = tp.constant(random_tensor(&[4, 3, 3, 3], 8, -1.0, 1.0)).unwrap();
            let y = tp.conv2d(x, w, None, 1, 1).unwrap();
            let p = tp.maxpool2(y).unwrap();
            tp.value(p).clone()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-500.0f64..500.0, 12)) {
            let mut tp = Tape::new();
            let x = tp.constant(Tensor::new(&[3, 4], v).unwrap()).unwrap();
            let y = tp.softmax_rows(x).unwrap();
            for row in tp.value(y).data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn adjoint_identity_holds(seed in 0u64..1000, cin in 1usize..4, cout in 1usize..4, h in 2usize..6, w in 2usize..6) {
            let (gap, norms) = adjoint_gap(seed, [1, cin, 2 * h, 2 * w], cout, 2, 2);
            prop_assert!(gap < 1e-9 * norms.max(1.0));
        }
    }
}
