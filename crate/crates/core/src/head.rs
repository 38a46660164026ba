//! Squeeze-and-excitation gating followed by the two-conv depth head.

use alloc::format;

use crate::error::{invalid, Result};
use crate::nn::{BatchNorm, Builder, Conv, Ctx};
use crate::params::{kaiming_uniform, ParamId};
use crate::real::Real;
use crate::tape::Var;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// SE reduction ratio r.
    pub reduction: usize,
    pub mid_channels: usize,
    pub depth_scale: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            reduction: 16,
            mid_channels: 64,
            depth_scale: 80.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    cfg: HeadConfig,
    channels: usize,
    /// (C/r)×C
    pub w1: ParamId,
    /// C×(C/r)
    pub w2: ParamId,
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    /// Gated features F_se, B×C×H×W.
    pub features: Var,
    /// Channel weights s, B×C.
    pub weights: Var,
}

impl Head {
    pub fn new<T: Real>(cfg: &HeadConfig, channels: usize, bld: &mut Builder<'_, T>) -> Result<Self> {
        let r = cfg.reduction;
        if r == 0 || channels % r != 0 {
            return Err(invalid("head", format!("channels {channels} not divisible by reduction {r}")));
        }
        if cfg.mid_channels == 0 {
            return Err(invalid("head", "mid channels must be positive"));
        }
        let hidden = channels / r;
        let w1 = kaiming_uniform(&[hidden, channels], channels, bld.rng)?;
        let w1 = bld.store.add("head.se.w1", w1);
        let w2 = kaiming_uniform(&[channels, hidden], hidden, bld.rng)?;
        let w2 = bld.store.add("head.se.w2", w2);
        Ok(Head {
            cfg: cfg.clone(),
            channels,
            w1,
            w2,
            conv1: Conv::new(bld, "head.conv1", channels, cfg.mid_channels, 3, false)?,
            bn1: BatchNorm::new(bld, "head.bn1", cfg.mid_channels)?,
            conv2: Conv::new(bld, "head.conv2", cfg.mid_channels, 1, 3, true)?,
        })
    }

    /// s = sigmoid(W2 · ReLU(W1 · GAP(f))), output f scaled per channel by s.
    pub fn channel_attention<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<ChannelAttention> {
        let (b, c, _, _) = ctx.tape.value(f).nchw("channel_attention")?;
        if c != self.channels {
            return Err(invalid("channel_attention", format!("expected {} channels, got {c}", self.channels)));
        }
        let (w1, w2) = (ctx.var(self.w1), ctx.var(self.w2));
        let t = &mut *ctx.tape;
        let z = t.global_avg_pool(f)?;
        let w1t = t.transpose(w1)?;
        let h = t.matmul(z, w1t)?;
        let h = t.relu(h)?;
        let w2t = t.transpose(w2)?;
        let s = t.matmul(h, w2t)?;
        let s = t.sigmoid(s)?;
        let s4 = t.reshape(s, &[b, c, 1, 1])?;
        let features = t.mul(f, s4)?;
        Ok(ChannelAttention { features, weights: s })
    }

    /// Channel attention → conv3×3 → batch norm → ReLU → conv3×3, in meters.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f_fused: Var) -> Result<Var> {
        let se = self.channel_attention(ctx, f_fused)?;
        let y = self.conv1.forward(ctx, se.features)?;
        let y = self.bn1.forward(ctx, y)?;
        let y = ctx.tape.relu(y)?;
        let y = self.conv2.forward(ctx, y)?;
        ctx.tape.scale(y, T::from_f64(self.cfg.depth_scale))
    }
}
