//! Five-level U-Net producing the depth features and the initial depth.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, mismatch, Result};
use crate::nn::{Builder, Conv, ConvBnRelu, ConvT, Ctx};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const LEVELS: usize = 5;
pub const IN_CHANNELS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub enc_channels: [usize; LEVELS],
    /// Channels of the full-resolution feature map.
    pub feature_channels: usize,
    /// Meters per normalized depth unit.
    pub depth_scale: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            enc_channels: [8, 16, 32, 64, 128],
            feature_channels: 8,
            depth_scale: 80.0,
        }
    }
}

impl UNetConfig {
    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let c = &self.enc_channels;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
        // conv without bias, then batch norm gamma and beta
        let block = |cin: usize, cout: usize| conv(cin, cout, 3) + 2 * cout;
        let mut n = 0;
        let mut cin = IN_CHANNELS;
        for &ch in c {
            n += block(cin, ch) + block(ch, ch);
            cin = ch;
        }
        for i in (0..LEVELS - 1).rev() {
            let out = if i == 0 { self.feature_channels } else { c[i] };
            n += conv(c[i + 1], c[i], 2) + c[i] + block(2 * c[i], out);
        }
        n + conv(self.feature_channels, 1, 1) + 1
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvT,
    fuse: ConvBnRelu,
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    encoder: Vec<EncoderBlock>,
    /// Coarsest stage first.
    decoder: Vec<DecoderStage>,
    head: Conv,
}

/// Full-resolution outputs of the U-Net.
#[derive(Clone, Copy, Debug)]
pub struct UNetOutput {
    pub f_depth: Var,
    pub d_init: Var,
}

impl UNet {
    pub fn new<T: Real>(cfg: &UNetConfig, bld: &mut Builder<'_, T>) -> Result<Self> {
        let c = cfg.enc_channels;
        if c.iter().any(|&ch| ch == 0) || cfg.feature_channels == 0 {
            return Err(invalid("unet", "channel counts must be positive"));
        }
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut cin = IN_CHANNELS;
        for (l, &ch) in c.iter().enumerate() {
            encoder.push(EncoderBlock {
                a: ConvBnRelu::new(bld, &format!("unet.enc{l}.a"), cin, ch, 3)?,
                b: ConvBnRelu::new(bld, &format!("unet.enc{l}.b"), ch, ch, 3)?,
            });
            cin = ch;
        }
        let mut decoder = Vec::with_capacity(LEVELS - 1);
        for i in (0..LEVELS - 1).rev() {
            let out = if i == 0 { cfg.feature_channels } else { c[i] };
            decoder.push(DecoderStage {
                up: ConvT::new(bld, &format!("unet.dec{i}.up"), c[i + 1], c[i], 2)?,
                fuse: ConvBnRelu::new(bld, &format!("unet.dec{i}.fuse"), 2 * c[i], out, 3)?,
            });
        }
        let head = Conv::new(bld, "unet.d_init", cfg.feature_channels, 1, 1, true)?;
        Ok(UNet {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// `x` is B×5×H×W with H and W divisible by 16.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<UNetOutput> {
        let (_, c, h, w) = ctx.tape.value(x).nchw("unet_forward")?;
        if c != IN_CHANNELS {
            return Err(invalid("unet_forward", format!("expected {IN_CHANNELS} input channels, got {c}")));
        }
        let m = 1 << (LEVELS - 1);
        if h % m != 0 || w % m != 0 {
            return Err(invalid("unet_forward", format!("input extents {h}×{w} must be divisible by {m}")));
        }
        let mut skips = Vec::with_capacity(LEVELS);
        let mut y = x;
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                y = ctx.tape.maxpool2(y)?;
            }
            y = block.a.forward(ctx, y)?;
            y = block.b.forward(ctx, y)?;
            skips.push(y);
        }
        skips.pop();
        for stage in &self.decoder {
            let up = stage.up.forward(ctx, y)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = ctx.tape.concat_channels(up, skip)?;
            y = stage.fuse.forward(ctx, cat)?;
        }
        let d = self.head.forward(ctx, y)?;
        let d_init = ctx.tape.scale(d, T::from_f64(self.cfg.depth_scale))?;
        Ok(UNetOutput { f_depth: y, d_init })
    }
}

/// Stacks RGB (B×3), sparse depth and validity (B×1 each) into the B×5
/// network input, dividing depth by `depth_scale`.
pub fn stack_input<T: Real>(
    rgb: &Tensor<T>,
    depth_sparse: &Tensor<T>,
    validity: &Tensor<T>,
    depth_scale: f64,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = rgb.nchw("stack_input")?;
    if c != 3 {
        return Err(mismatch("stack_input", rgb.shape(), &[b, 3, h, w]));
    }
    for t in [depth_sparse, validity] {
        if t.shape() != [b, 1, h, w] {
            return Err(mismatch("stack_input", t.shape(), &[b, 1, h, w]));
        }
    }
    let hw = h * w;
    let inv = T::from_f64(1.0 / depth_scale);
    let mut data = vec![T::zero(); b * IN_CHANNELS * hw];
    for i in 0..b {
        let out = &mut data[i * IN_CHANNELS * hw..(i + 1) * IN_CHANNELS * hw];
        out[..3 * hw].copy_from_slice(&rgb.data()[i * 3 * hw..(i + 1) * 3 * hw]);
        for (o, &d) in out[3 * hw..4 * hw].iter_mut().zip(&depth_sparse.data()[i * hw..(i + 1) * hw]) {
            *o = d * inv;
        }
        out[4 * hw..].copy_from_slice(&validity.data()[i * hw..(i + 1) * hw]);
    }
    Tensor::new(&[b, IN_CHANNELS, h, w], data)
}

/// Inverse of [`stack_input`].
pub fn unstack_input<T: Real>(x: &Tensor<T>, depth_scale: f64) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.nchw("unstack_input")?;
    if c != IN_CHANNELS {
        return Err(mismatch("unstack_input", x.shape(), &[b, IN_CHANNELS, h, w]));
    }
    let hw = h * w;
    let (mut rgb, mut d, mut v) = (Vec::new(), Vec::new(), Vec::new());
    let s = T::from_f64(depth_scale);
    for item in x.data().chunks(IN_CHANNELS * hw) {
        rgb.extend_from_slice(&item[..3 * hw]);
        d.extend(item[3 * hw..4 * hw].iter().map(|&z| z * s));
        v.extend_from_slice(&item[4 * hw..]);
    }
    Ok((
        Tensor::new(&[b, 3, h, w], rgb)?,
        Tensor::new(&[b, 1, h, w], d)?,
        Tensor::new(&[b, 1, h, w], v)?,
    ))
}
