//! Layer building blocks shared by the network modules.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{BatchNormMode, RunningStats, Tape, Var};
use crate::tensor::Tensor;

/// Everything a forward pass needs: the tape, the tape variable of every
/// parameter (indexed by [`ParamId`]) and the batch-norm running statistics.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    vars: &'a [Var],
    stats: &'a mut [RunningStats<T>],
    pub train: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, vars: &'a [Var], stats: &'a mut [RunningStats<T>], train: bool) -> Self {
        Ctx { tape, vars, stats, train }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// Registry used while building a network: parameters, batch-norm slots and
/// the initialization RNG.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub stats: &'a mut Vec<RunningStats<T>>,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `k×k` convolution with "same" padding for odd `k`.
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<Self> {
        let w = kaiming_uniform(&[cout, cin, k, k], cin * k * k, bld.rng)?;
        let w = bld.store.add(format!("{name}.weight"), w);
        let b = if bias {
            Some(bld.store.add(format!("{name}.bias"), Tensor::zeros(&[cout])?))
        } else {
            None
        };
        Ok(Conv { w, b, stride: 1, pad: k / 2 })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.w), self.b.map(|b| ctx.var(b)));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution with stride equal to the kernel size.
#[derive(Clone, Debug)]
pub struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvT {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        // each output pixel sees exactly cin inputs when stride == k
        let w = kaiming_uniform(&[cin, cout, k, k], cin, bld.rng)?;
        let w = bld.store.add(format!("{name}.weight"), w);
        let b = bld.store.add(format!("{name}.bias"), Tensor::zeros(&[cout])?);
        Ok(ConvT { w, b, stride: k })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.w), ctx.var(self.b));
        ctx.tape.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let gamma = bld.store.add(format!("{name}.gamma"), Tensor::ones(&[c])?);
        let beta = bld.store.add(format!("{name}.beta"), Tensor::zeros(&[c])?);
        bld.stats.push(RunningStats::new(c));
        Ok(BatchNorm {
            gamma,
            beta,
            slot: bld.stats.len() - 1,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        let stats = &mut ctx.stats[self.slot];
        let mode = if ctx.train {
            BatchNormMode::Train(stats)
        } else {
            BatchNormMode::Eval(stats)
        };
        ctx.tape.batchnorm2d(x, g, b, mode)
    }
}

/// conv → batch norm → ReLU. The conv has no bias since the normalization
/// would subtract it again.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Real>(bld: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv::new(bld, &format!("{name}.conv"), cin, cout, k, false)?,
            bn: BatchNorm::new(bld, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.tape.relu(y)
    }
}
