//! The complete network: U-Net, mask cross-attention, fusion and head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, CrossAttention, Fusion};
use crate::error::{mismatch, Error, Result};
use crate::gradcheck::{random_tensor, relative_error, CheckReport, DEFAULT_STEP};
use crate::head::{Head, HeadConfig};
use crate::loss::{total_loss, LossKind, LossWeights};
use crate::nn::{Builder, Ctx};
use crate::params::{Checkpoint, ParamStore};
use crate::real::Real;
use crate::tape::{Resize, RunningStats, Tape, Var};
use crate::tensor::Tensor;
use crate::unet::{UNet, UNetConfig, IN_CHANNELS};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub unet: UNetConfig,
    pub attention: AttentionConfig,
    /// Kernel for bringing the merged mask to feature resolution.
    pub mask_resize: Resize,
    pub fusion_channels: usize,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 256,
            width: 512,
            unet: UNetConfig::default(),
            attention: AttentionConfig::default(),
            mask_resize: Resize::Nearest,
            fusion_channels: 128,
            head: HeadConfig::default(),
        }
    }
}

/// Network inputs for one batch; all tensors are rank 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// B×5×H×W stacked RGB, scaled sparse depth and validity.
    pub input: Tensor<T>,
    /// B×1×H×W merged mask prior from the mask provider.
    pub m_seg: Tensor<T>,
    /// B×1×H×W ground-truth depth in meters.
    pub gt: Tensor<T>,
    /// B×1×H×W ground-truth merged foreground.
    pub foreground: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let (b, c, ih, iw) = self.input.nchw("batch")?;
        if c != IN_CHANNELS || (ih, iw) != (h, w) {
            return Err(mismatch("batch", self.input.shape(), &[b, IN_CHANNELS, h, w]));
        }
        for t in [&self.m_seg, &self.gt, &self.foreground] {
            if t.shape() != [b, 1, h, w] {
                return Err(mismatch("batch", t.shape(), &[b, 1, h, w]));
            }
        }
        Ok(())
    }
}

/// Tape handles of every intermediate the pipeline exposes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub m_seg: Var,
    pub f_depth: Var,
    pub d_init: Var,
    pub f_att: Var,
    pub attention: Option<Var>,
    pub f_fused: Var,
    pub d_final: Var,
}

#[derive(Clone, Debug)]
pub struct DepthNet<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    stats: Vec<RunningStats<T>>,
    unet: UNet,
    attention: CrossAttention,
    fusion: Fusion,
    head: Head,
}

impl<T: Real> DepthNet<T> {
    /// Freshly initialized network; weights depend only on `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut stats = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bld = Builder {
            store: &mut params,
            stats: &mut stats,
            rng: &mut rng,
        };
        let cd = cfg.unet.feature_channels;
        let unet = UNet::new(&cfg.unet, &mut bld)?;
        let attention = CrossAttention::new(&cfg.attention, cd, &mut bld)?;
        let fusion = Fusion::new(cd, cfg.fusion_channels, &mut bld)?;
        let head = Head::new(&cfg.head, cfg.fusion_channels, &mut bld)?;
        Ok(DepthNet {
            cfg: cfg.clone(),
            params,
            stats,
            unet,
            attention,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    /// Puts every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Vec<Var>> {
        self.params.values().iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Runs the pipeline. `vars` come from [`DepthNet::bind`]; training mode
    /// uses batch statistics and updates the running estimates.
    pub fn forward(&mut self, tape: &mut Tape<T>, vars: &[Var], batch: &Batch<T>, train: bool) -> Result<ForwardOutput> {
        if vars.len() != self.params.len() {
            return Err(mismatch("forward", &[vars.len()], &[self.params.len()]));
        }
        batch.validate(self.cfg.height, self.cfg.width)?;
        let mut ctx = Ctx::new(tape, vars, &mut self.stats, train);
        let x = ctx.tape.constant(batch.input.clone())?;
        let m_seg = ctx.tape.constant(batch.m_seg.clone())?;
        let u = self.unet.forward(&mut ctx, x)?;
        let att = self.attention.forward(&mut ctx, m_seg, u.f_depth)?;
        let f_fused = self.fusion.forward(&mut ctx, att.f_att, u.f_depth)?;
        let d_final = self.head.forward(&mut ctx, f_fused)?;
        Ok(ForwardOutput {
            m_seg,
            f_depth: u.f_depth,
            d_init: u.d_init,
            f_att: att.f_att,
            attention: att.weights,
            f_fused,
            d_final,
        })
    }

    /// Parameters and running statistics as named tensors.
    pub fn export(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.values().iter().cloned())
            .collect();
        for (i, s) in self.stats.iter().enumerate() {
            let c = s.mean.len();
            out.push((format!("bn_stats.{i}.mean"), Tensor::new(&[c], s.mean.clone()).expect("c > 0")));
            out.push((format!("bn_stats.{i}.var"), Tensor::new(&[c], s.var.clone()).expect("c > 0")));
        }
        out
    }

    /// Loads parameters and running statistics from a checkpoint written
    /// by a network of the same architecture.
    pub fn import(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = ck.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match the configured {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t.clone())
        };
        let mut values = Vec::with_capacity(self.params.len());
        for (name, p) in self.params.names().iter().zip(self.params.values()) {
            values.push(fetch(name, p.shape())?);
        }
        let mut stats = Vec::with_capacity(self.stats.len());
        for (i, s) in self.stats.iter().enumerate() {
            let c = [s.mean.len()];
            stats.push(RunningStats {
                mean: fetch(&format!("bn_stats.{i}.mean"), &c)?.into_data(),
                var: fetch(&format!("bn_stats.{i}.var"), &c)?.into_data(),
            });
        }
        for (dst, v) in self.params.values_mut().iter_mut().zip(values) {
            *dst = v;
        }
        self.stats = stats;
        Ok(())
    }
}

/// Settings of the small network used for the end-to-end gradient check.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 32,
        unet: UNetConfig {
            enc_channels: [4, 4, 8, 8, 8],
            feature_channels: 4,
            depth_scale: 80.0,
        },
        attention: AttentionConfig {
            dim: 8,
            height: 4,
            width: 8,
            ..AttentionConfig::default()
        },
        mask_resize: Resize::Nearest,
        fusion_channels: 16,
        head: HeadConfig {
            reduction: 16,
            mid_channels: 8,
            depth_scale: 80.0,
        },
    }
}

/// Random batch for `cfg`: a few zero-depth pixels and a blocky binary mask.
pub fn random_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> Result<Batch<f64>> {
    let (h, w) = (cfg.height, cfg.width);
    let rgb = random_tensor(&[batch, 3, h, w], seed, 0.0, 1.0);
    let u = random_tensor(&[batch, 1, h, w], seed + 1, 0.0, 1.0);
    let gt = u.map(|v| if v < 0.1 { 0.0 } else { 2.0 + 40.0 * v });
    let keep = random_tensor(&[batch, 1, h, w], seed + 2, 0.0, 1.0);
    let validity = Tensor::new(
        gt.shape(),
        keep.data().iter().zip(gt.data()).map(|(&k, &g)| if k < 0.3 && g > 0.0 { 1.0 } else { 0.0 }).collect(),
    )?;
    let sparse = Tensor::new(gt.shape(), gt.data().iter().zip(validity.data()).map(|(g, v)| g * v).collect())?;
    let input = crate::unet::stack_input(&rgb, &sparse, &validity, cfg.unet.depth_scale)?;
    let blocks = random_tensor(&[batch, 1, h / 4, w / 4], seed + 3, 0.0, 1.0).map(|v| if v < 0.4 { 1.0 } else { 0.0 });
    let m_seg = crate::seg::resize_mask(&blocks.reshape(&[batch, 1, h / 4, w / 4])?, h, w, Resize::Nearest)?;
    Ok(Batch {
        input,
        foreground: m_seg.clone(),
        m_seg,
        gt,
    })
}

/// Finite-difference check of the training loss against `n_coords`
/// parameter coordinates of the micro network (double precision, train-mode
/// batch norm). Every parameter contributes at least one coordinate.
pub fn pipeline_gradcheck(n_coords: usize, seed: u64) -> Result<CheckReport> {
    let cfg = micro_config();
    let net: DepthNet<f64> = DepthNet::new(&cfg, seed)?;
    let batch = random_batch(&cfg, 2, seed ^ 0xba7c)?;
    let weights = LossWeights::default();
    let loss_at = |params: &[Tensor<f64>], grad: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut net = net.clone();
        for (dst, src) in net.params.values_mut().iter_mut().zip(params) {
            *dst = src.clone();
        }
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape)?;
        let out = net.forward(&mut tape, &vars, &batch, true)?;
        let parts = total_loss(
            &mut tape,
            out.d_init,
            out.d_final,
            &batch.gt,
            &batch.m_seg,
            &batch.foreground,
            &weights,
            LossKind::L1,
        )?;
        let value = tape.value(parts.total).item();
        if !grad {
            return Ok((value, None));
        }
        let mut g = tape.backward(parts.total)?;
        let grads = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| g.take(v).map_or_else(|| Tensor::zeros(p.shape()), Ok))
            .collect::<Result<Vec<_>>>()?;
        Ok((value, Some(grads)))
    };
    let mut params: Vec<Tensor<f64>> = net.params.values().to_vec();
    let (_, grads) = loss_at(&params, true)?;
    let grads = grads.expect("requested");
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let coords = crate::gradcheck::sample_coords(&sizes, n_coords, seed);
    let mut worst = 0.0f64;
    for &(i, j) in &coords {
        let orig = params[i].data()[j];
        params[i].data_mut()[j] = orig + DEFAULT_STEP;
        let (fp, _) = loss_at(&params, false)?;
        params[i].data_mut()[j] = orig - DEFAULT_STEP;
        let (fm, _) = loss_at(&params, false)?;
        params[i].data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * DEFAULT_STEP);
        worst = worst.max(relative_error(grads[i].data()[j], numeric));
    }
    Ok(CheckReport {
        name: String::from("pipeline"),
        cases: 1,
        coords: coords.len(),
        max_rel_error: worst,
        tolerance: PIPELINE_TOLERANCE,
    })
}

pub const PIPELINE_TOLERANCE: f64 = 1e-3;
