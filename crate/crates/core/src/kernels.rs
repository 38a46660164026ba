//! Raw forward/backward kernels on flat row-major buffers.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{gemm, Layout, Real};

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 21;

/// Geometry of a sliding k×k window over a C×H×W image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 {
            return None;
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < k || pw < k || (ph - k) % stride != 0 || (pw - k) % stride != 0 {
            return None;
        }
        Some(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (ph - k) / stride + 1,
            ow: (pw - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn npix(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / self.rows()).max(64).min(self.npix())
    }
}

/// Calls `f(dst, src)` for every tap of window row `(ky, kx)` over output
/// pixels `p0..p1`: `dst` indexes the column row, `src` the image plane. Taps
/// that fall into the padding are skipped. Runs of contiguous taps are passed
/// as `(dst_start, src_start, len)` with unit source stride when `stride == 1`.
#[inline]
fn for_each_run(g: &ConvGeom, ky: usize, kx: usize, p0: usize, p1: usize, mut f: impl FnMut(usize, usize, usize)) {
    let mut p = p0;
    while p < p1 {
        let (oy, ox0) = (p / g.ow, p % g.ow);
        let ox1 = g.ow.min(ox0 + (p1 - p));
        let iy = (oy * g.stride + ky).wrapping_sub(g.pad);
        if iy < g.h {
            // valid ox satisfy pad <= ox·s + kx < w + pad
            let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
            let hi = (g.w + g.pad).saturating_sub(kx).div_ceil(g.stride).min(g.ow);
            let (a, b) = (ox0.max(lo), ox1.min(hi));
            if g.stride == 1 {
                if a < b {
                    f(p - ox0 + a - p0, iy * g.w + a + kx - g.pad, b - a);
                }
            } else {
                for ox in a..b {
                    f(p - ox0 + ox - p0, iy * g.w + ox * g.stride + kx - g.pad, 1);
                }
            }
        }
        p += ox1 - ox0;
    }
}

/// Fills `cols` ((c·k·k) × (p1−p0), row-major) with the windows of output
/// pixels `p0..p1`.
fn im2col<T: Real>(img: &[T], g: &ConvGeom, p0: usize, p1: usize, cols: &mut [T]) {
    let np = p1 - p0;
    let hw = g.h * g.w;
    for ci in 0..g.c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * np..(r + 1) * np];
                row.fill(T::zero());
                for_each_run(g, ky, kx, p0, p1, |d, s, n| row[d..d + n].copy_from_slice(&plane[s..s + n]));
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds window columns back into `img`.
fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, p0: usize, p1: usize, img: &mut [T]) {
    let np = p1 - p0;
    let hw = g.h * g.w;
    for ci in 0..g.c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * np..(r + 1) * np];
                for_each_run(g, ky, kx, p0, p1, |d, s, n| {
                    for (o, &v) in plane[s..s + n].iter_mut().zip(&row[d..d + n]) {
                        *o += v;
                    }
                });
            }
        }
    }
}

fn chunks(total: usize, step: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..total).step_by(step).map(move |p0| (p0, (p0 + step).min(total)))
}

/// Output-channel count up to which a 3×3 convolution skips im2col and
/// accumulates shifted rows directly.
const DIRECT_MAX_COUT: usize = 4;

fn use_direct(g: &ConvGeom, cout: usize) -> bool {
    !g.is_pointwise() && g.stride == 1 && cout <= DIRECT_MAX_COUT
}

fn add_bias<T: Real>(out: &mut [T], bias: Option<&[T]>, npix: usize) {
    if let Some(bias) = bias {
        for (plane, &bv) in out.chunks_mut(npix).zip(bias.iter().cycle()) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// One image, `out` is Cout×oh×ow and must start zeroed.
fn direct_forward<T: Real>(x: &[T], g: &ConvGeom, w: &[T], cout: usize, out: &mut [T]) {
    let (hw, npix) = (g.h * g.w, g.npix());
    for (co, op) in out.chunks_mut(npix).enumerate().take(cout) {
        for ci in 0..g.c {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[((co * g.c + ci) * g.k + ky) * g.k + kx];
                    for_each_run(g, ky, kx, 0, npix, |d, s, n| {
                        for (o, &v) in op[d..d + n].iter_mut().zip(&plane[s..s + n]) {
                            *o += wv * v;
                        }
                    });
                }
            }
        }
    }
}

fn direct_backward<T: Real>(x: &[T], g: &ConvGeom, w: &[T], cout: usize, dy: &[T], mut dx: Option<&mut [T]>, mut dw: Option<&mut [T]>) {
    let (hw, npix) = (g.h * g.w, g.npix());
    for (co, gp) in dy.chunks(npix).enumerate().take(cout) {
        for ci in 0..g.c {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wi = ((co * g.c + ci) * g.k + ky) * g.k + kx;
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[wi];
                        let plane = &mut dx[ci * hw..(ci + 1) * hw];
                        for_each_run(g, ky, kx, 0, npix, |d, s, n| {
                            for (o, &v) in plane[s..s + n].iter_mut().zip(&gp[d..d + n]) {
                                *o += wv * v;
                            }
                        });
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        let plane = &x[ci * hw..(ci + 1) * hw];
                        let mut acc = T::zero();
                        for_each_run(g, ky, kx, 0, npix, |d, s, n| {
                            acc += plane[s..s + n].iter().zip(&gp[d..d + n]).map(|(&a, &b)| a * b).sum::<T>();
                        });
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
}

/// Cross-correlation. `x`: B×C×H×W, `w`: Cout×C×k×k. Returns B×Cout×oh×ow.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (kk, npix, in_sz) = (g.rows(), g.npix(), g.c * g.h * g.w);
    let mut out = vec![T::zero(); batch * cout * npix];
    if use_direct(g, cout) {
        for b in 0..batch {
            let ob = &mut out[b * cout * npix..(b + 1) * cout * npix];
            direct_forward(&x[b * in_sz..(b + 1) * in_sz], g, w, cout, ob);
        }
        add_bias(&mut out, bias, npix);
        return out;
    }
    let step = g.chunk();
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * step }];
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * cout * npix..(b + 1) * cout * npix];
        if g.is_pointwise() {
            gemm(cout, kk, npix, T::one(), w, Layout::row(kk), xb, Layout::row(npix), T::zero(), ob, Layout::row(npix));
        } else {
            for (p0, p1) in chunks(npix, step) {
                let np = p1 - p0;
                im2col(xb, g, p0, p1, &mut cols[..kk * np]);
                gemm(
                    cout,
                    kk,
                    np,
                    T::one(),
                    w,
                    Layout::row(kk),
                    &cols[..kk * np],
                    Layout::row(np),
                    T::zero(),
                    &mut ob[p0..],
                    Layout::row(npix),
                );
            }
        }
        if let Some(bias) = bias {
            for (co, plane) in ob.chunks_mut(npix).enumerate() {
                let bv = bias[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]: returns `(dx, dw, db)`; each is computed
/// only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    cout: usize,
    dy: &[T],
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (kk, npix, in_sz) = (g.rows(), g.npix(), g.c * g.h * g.w);
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); cout];
        for b in 0..batch {
            for (co, plane) in dy[b * cout * npix..(b + 1) * cout * npix].chunks(npix).enumerate() {
                db[co] += plane.iter().copied().sum::<T>();
            }
        }
        db
    });
    if use_direct(g, cout) {
        for b in 0..batch {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let dyb = &dy[b * cout * npix..(b + 1) * cout * npix];
            let dxb = dx.as_mut().map(|d| &mut d[b * in_sz..(b + 1) * in_sz]);
            direct_backward(xb, g, w, cout, dyb, dxb, dw.as_deref_mut());
        }
        return (dx, dw, db);
    }
    let step = g.chunk();
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * step }];
    let mut dcols = vec![T::zero(); if pointwise || dx.is_none() { 0 } else { kk * step }];
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let dyb = &dy[b * cout * npix..(b + 1) * cout * npix];
        if pointwise {
            if let Some(dw) = dw.as_mut() {
                gemm(cout, npix, kk, T::one(), dyb, Layout::row(npix), xb, Layout::trans(npix), T::one(), dw, Layout::row(kk));
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
                gemm(kk, cout, npix, T::one(), w, Layout::trans(kk), dyb, Layout::row(npix), T::zero(), dxb, Layout::row(npix));
            }
            continue;
        }
        for (p0, p1) in chunks(npix, step) {
            let np = p1 - p0;
            if let Some(dw) = dw.as_mut() {
                im2col(xb, g, p0, p1, &mut cols[..kk * np]);
                gemm(
                    cout,
                    np,
                    kk,
                    T::one(),
                    &dyb[p0..],
                    Layout::row(npix),
                    &cols[..kk * np],
                    Layout::trans(np),
                    T::one(),
                    dw,
                    Layout::row(kk),
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    kk,
                    cout,
                    np,
                    T::one(),
                    w,
                    Layout::trans(kk),
                    &dyb[p0..],
                    Layout::row(npix),
                    T::zero(),
                    &mut dcols[..kk * np],
                    Layout::row(np),
                );
                col2im_add(&dcols[..kk * np], g, p0, p1, &mut dx[b * in_sz..(b + 1) * in_sz]);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with zero padding. `x`: B×Cin×h×w, `w`: Cin×Cout×k×k.
/// `g` describes the output image (Cout×oh×ow) as seen by the adjoint conv,
/// i.e. `g.oh == h`, `g.ow == w`.
pub(crate) fn conv_transpose_forward<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (kk, npix_in, out_sz) = (g.rows(), g.npix(), g.c * g.h * g.w);
    let mut out = vec![T::zero(); batch * out_sz];
    let step = g.chunk();
    let mut cols = vec![T::zero(); kk * step];
    for b in 0..batch {
        let xb = &x[b * cin * npix_in..(b + 1) * cin * npix_in];
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        for (p0, p1) in chunks(npix_in, step) {
            let np = p1 - p0;
            gemm(
                kk,
                cin,
                np,
                T::one(),
                w,
                Layout::trans(kk),
                &xb[p0..],
                Layout::row(npix_in),
                T::zero(),
                &mut cols[..kk * np],
                Layout::row(np),
            );
            col2im_add(&cols[..kk * np], g, p0, p1, ob);
        }
        if let Some(bias) = bias {
            let hw = g.h * g.w;
            for (co, plane) in ob.chunks_mut(hw).enumerate() {
                let bv = bias[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (kk, npix_in, out_sz) = (g.rows(), g.npix(), g.c * g.h * g.w);
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let db = need[2].then(|| {
        let hw = g.h * g.w;
        let mut db = vec![T::zero(); g.c];
        for b in 0..batch {
            for (co, plane) in dy[b * out_sz..(b + 1) * out_sz].chunks(hw).enumerate() {
                db[co] += plane.iter().copied().sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }
    let step = g.chunk();
    let mut cols = vec![T::zero(); kk * step];
    for b in 0..batch {
        let xb = &x[b * cin * npix_in..(b + 1) * cin * npix_in];
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        for (p0, p1) in chunks(npix_in, step) {
            let np = p1 - p0;
            im2col(dyb, g, p0, p1, &mut cols[..kk * np]);
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * cin * npix_in..(b + 1) * cin * npix_in];
                gemm(
                    cin,
                    kk,
                    np,
                    T::one(),
                    w,
                    Layout::row(kk),
                    &cols[..kk * np],
                    Layout::row(np),
                    T::zero(),
                    &mut dxb[p0..],
                    Layout::row(npix_in),
                );
            }
            if let Some(dw) = dw.as_mut() {
                gemm(
                    cin,
                    np,
                    kk,
                    T::one(),
                    &xb[p0..],
                    Layout::row(npix_in),
                    &cols[..kk * np],
                    Layout::trans(np),
                    T::one(),
                    dw,
                    Layout::row(kk),
                );
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 max pooling with stride 2 over `planes` H×W planes. Ties resolve to the
/// first window element in row-major order.
pub(crate) fn maxpool2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Per-axis sampling plan for resizing an axis of length `n_in` to `n_out`.
#[derive(Clone, Debug)]
pub(crate) struct AxisPlan<T> {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub frac: Vec<T>,
}

/// Half-pixel (align_corners = false) linear sampling positions.
pub(crate) fn linear_plan<T: Real>(n_in: usize, n_out: usize) -> AxisPlan<T> {
    let scale = n_in as f64 / n_out as f64;
    let mut plan = AxisPlan {
        i0: Vec::with_capacity(n_out),
        i1: Vec::with_capacity(n_out),
        frac: Vec::with_capacity(n_out),
    };
    for d in 0..n_out {
        let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        plan.i0.push(i0);
        plan.i1.push(i1);
        plan.frac.push(T::from_f64(src - i0 as f64));
    }
    plan
}

/// Nearest-neighbour sampling: source index `floor(d · n_in / n_out)`.
pub(crate) fn nearest_plan<T: Real>(n_in: usize, n_out: usize) -> AxisPlan<T> {
    let idx: Vec<usize> = (0..n_out).map(|d| ((d * n_in) / n_out).min(n_in - 1)).collect();
    AxisPlan {
        i1: idx.clone(),
        i0: idx,
        frac: vec![T::zero(); n_out],
    }
}

pub(crate) fn resample_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    py: &AxisPlan<T>,
    px: &AxisPlan<T>,
) -> Vec<T> {
    let (oh, ow) = (py.i0.len(), px.i0.len());
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let (r0, r1, fy) = (py.i0[y] * w, py.i1[y] * w, py.frac[y]);
            for xx in 0..ow {
                let (c0, c1, fx) = (px.i0[xx], px.i1[xx], px.frac[xx]);
                let top = src[r0 + c0] + fx * (src[r0 + c1] - src[r0 + c0]);
                let bot = src[r1 + c0] + fx * (src[r1 + c1] - src[r1 + c0]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    out
}

pub(crate) fn resample_backward<T: Real>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    py: &AxisPlan<T>,
    px: &AxisPlan<T>,
) -> Vec<T> {
    let (oh, ow) = (py.i0.len(), px.i0.len());
    let mut dx = vec![T::zero(); planes * h * w];
    let one = T::one();
    for p in 0..planes {
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let (r0, r1, fy) = (py.i0[y] * w, py.i1[y] * w, py.frac[y]);
            for xx in 0..ow {
                let (c0, c1, fx) = (px.i0[xx], px.i1[xx], px.frac[xx]);
                let v = g[y * ow + xx];
                d[r0 + c0] += v * (one - fy) * (one - fx);
                d[r0 + c1] += v * (one - fy) * fx;
                d[r1 + c0] += v * fy * (one - fx);
                d[r1 + c1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Batch statistics per channel over B×H×W: `(mean, biased variance)`.
pub(crate) fn channel_stats<T: Real>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            s += x[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            ss += x[base..base + hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    (mean, var)
}

/// Row-wise softmax over the last axis of length `n`.
pub(crate) fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut s = T::zero();
        for &v in row {
            let e = (v - mx).exp();
            s += e;
            out.push(e);
        }
        let inv = T::one() / s;
        out[start..].iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Index strides of `shape` (right-aligned to rank 4) viewed inside the
/// broadcast `out` shape; broadcast axes get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize; 4]) -> [usize; 4] {
    let mut dims = [1; 4];
    dims[4 - shape.len()..].copy_from_slice(shape);
    let mut strides = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        strides[i] = if dims[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= dims[i];
    }
    strides
}

/// Visits every output position of a rank-4 broadcast with the flat indices
/// into both operands.
#[inline]
pub(crate) fn for_each_broadcast(
    out: &[usize; 4],
    sa: &[usize; 4],
    sb: &[usize; 4],
    mut f: impl FnMut(usize, usize, usize),
) {
    let mut o = 0;
    for i0 in 0..out[0] {
        for i1 in 0..out[1] {
            for i2 in 0..out[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out[3] {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}
