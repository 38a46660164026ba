//! Mask-guided cross-attention at a reduced working resolution, and the
//! concat fusion block.

use alloc::format;

use num_traits::Float;

use crate::error::{invalid, mismatch, Result};
use crate::nn::{BatchNorm, Builder, Conv, Ctx};
use crate::real::Real;
use crate::tape::{Resize, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    /// Embedding width C_a.
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    /// Kernel used to bring the mask down to the working resolution.
    pub mask_resize: Resize,
    /// When false the attended features are replaced by zeros.
    pub enabled: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            dim: 32,
            height: 16,
            width: 32,
            mask_resize: Resize::Bilinear,
            enabled: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    cfg: AttentionConfig,
    feature_channels: usize,
    w_q: Conv,
    w_k: Conv,
    w_v: Conv,
    w_out: Conv,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// B×C_d×H×W.
    pub f_att: Var,
    /// B×N×N attention weights, absent when attention is disabled.
    pub weights: Option<Var>,
}

impl CrossAttention {
    pub fn new<T: Real>(cfg: &AttentionConfig, feature_channels: usize, bld: &mut Builder<'_, T>) -> Result<Self> {
        if cfg.dim == 0 || cfg.height == 0 || cfg.width == 0 {
            return Err(invalid("cross_attention", "dimension and working extents must be positive"));
        }
        let (ca, cd) = (cfg.dim, feature_channels);
        Ok(CrossAttention {
            cfg: cfg.clone(),
            feature_channels,
            w_q: Conv::new(bld, "attn.q", 1, ca, 1, true)?,
            // No biases past the query: softmax cancels a key bias, a value
            // bias passes through A unchanged (rows sum to one), and an output
            // bias only shifts channels that the fusion batch norm re-centres
            // whenever the ReLU is active everywhere.
            w_k: Conv::new(bld, "attn.k", cd, ca, 1, false)?,
            w_v: Conv::new(bld, "attn.v", cd, ca, 1, false)?,
            w_out: Conv::new(bld, "attn.out", ca, cd, 1, false)?,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    /// Queries from the mask `m_seg` (B×1×H×W), keys and values from
    /// `f_depth` (B×C_d×H×W).
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, m_seg: Var, f_depth: Var) -> Result<AttentionOutput> {
        let (b, cd, h, w) = ctx.tape.value(f_depth).nchw("cross_attention")?;
        if cd != self.feature_channels {
            return Err(invalid("cross_attention", format!("expected {} feature channels, got {cd}", self.feature_channels)));
        }
        if ctx.tape.shape(m_seg) != [b, 1, h, w] {
            return Err(mismatch("cross_attention", ctx.tape.shape(m_seg), &[b, 1, h, w]));
        }
        if !self.cfg.enabled {
            let zeros = ctx.tape.constant(Tensor::zeros(&[b, cd, h, w])?)?;
            return Ok(AttentionOutput {
                f_att: zeros,
                weights: None,
            });
        }
        let (ha, wa, ca) = (self.cfg.height, self.cfg.width, self.cfg.dim);
        let n = ha * wa;
        let tape = &mut *ctx.tape;
        let ms = tape.interpolate(m_seg, ha, wa, self.cfg.mask_resize)?;
        let fd = tape.interpolate(f_depth, ha, wa, Resize::Bilinear)?;
        let q = self.w_q.forward(ctx, ms)?;
        let k = self.w_k.forward(ctx, fd)?;
        let v = self.w_v.forward(ctx, fd)?;
        let tape = &mut *ctx.tape;
        // B×C_a×h×w → B×N×C_a
        let mut flat = |x: Var| -> Result<Var> {
            let x = tape.reshape(x, &[b, ca, n])?;
            tape.transpose(x)
        };
        let (q, k, v) = (flat(q)?, flat(k)?, flat(v)?);
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::from_f64(1.0 / Float::sqrt(ca as f64)))?;
        let a = tape.softmax_rows(scores)?;
        let o = tape.matmul(a, v)?;
        let o = tape.transpose(o)?;
        let o = tape.reshape(o, &[b, ca, ha, wa])?;
        let o = self.w_out.forward(ctx, o)?;
        let o = ctx.tape.relu(o)?;
        let f_att = ctx.tape.interpolate(o, h, w, Resize::Bilinear)?;
        Ok(AttentionOutput {
            f_att,
            weights: Some(a),
        })
    }
}

/// concat(F_att, F_depth) → 1×1 conv → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct Fusion {
    conv: Conv,
    bn: BatchNorm,
}

impl Fusion {
    pub fn new<T: Real>(feature_channels: usize, out_channels: usize, bld: &mut Builder<'_, T>) -> Result<Self> {
        if out_channels == 0 {
            return Err(invalid("fuse_features", "output channels must be positive"));
        }
        Ok(Fusion {
            conv: Conv::new(bld, "fuse.conv", 2 * feature_channels, out_channels, 1, false)?,
            bn: BatchNorm::new(bld, "fuse.bn", out_channels)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f_att: Var, f_depth: Var) -> Result<Var> {
        if ctx.tape.shape(f_att) != ctx.tape.shape(f_depth) {
            return Err(mismatch("fuse_features", ctx.tape.shape(f_att), ctx.tape.shape(f_depth)));
        }
        let cat = ctx.tape.concat_channels(f_att, f_depth)?;
        let y = self.conv.forward(ctx, cat)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.tape.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, probe, random_tensor};
    use crate::params::ParamStore;
    use crate::tape::{RunningStats, Tape};
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        attn: CrossAttention,
        fusion: Fusion,
        store: ParamStore<f64>,
        stats: Vec<RunningStats<f64>>,
    }

    fn fixture(cfg: AttentionConfig, cd: usize, cf: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut stats = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bld = Builder {
            store: &mut store,
            stats: &mut stats,
            rng: &mut rng,
        };
        let attn = CrossAttention::new(&cfg, cd, &mut bld).unwrap();
        let fusion = Fusion::new(cd, cf, &mut bld).unwrap();
        Fixture { attn, fusion, store, stats }
    }

    fn params(tape: &mut Tape<f64>, store: &ParamStore<f64>) -> Vec<Var> {
        store.values().iter().map(|v| tape.param(v.clone()).unwrap()).collect()
    }

    #[test]
    fn rows_are_distributions_at_default_resolution() {
        let mut f = fixture(AttentionConfig::default(), 8, 16);
        let mut tape = Tape::new();
        let vars = params(&mut tape, &f.store);
        let m = tape.constant(random_tensor(&[1, 1, 64, 128], 1, 0.0, 1.0)).unwrap();
        let fd = tape.constant(random_tensor(&[1, 8, 64, 128], 2, -1.0, 1.0)).unwrap();
        let mut ctx = Ctx::new(&mut tape, &vars, &mut f.stats, true);
        let out = f.attn.forward(&mut ctx, m, fd).unwrap();
        let a = tape.value(out.weights.unwrap());
        assert_eq!(a.shape(), &[1, 512, 512]);
        for row in a.data().chunks(512) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        assert_eq!(tape.shape(out.f_att), &[1, 8, 64, 128]);
    }

    #[test]
    fn single_location_returns_values() {
        let cfg = AttentionConfig {
            height: 1,
            width: 1,
            ..AttentionConfig::default()
        };
        let mut f = fixture(cfg, 4, 8);
        let mut tape = Tape::new();
        let vars = params(&mut tape, &f.store);
        let m = tape.constant(random_tensor(&[1, 1, 16, 32], 1, 0.0, 1.0)).unwrap();
        let fd = tape.constant(random_tensor(&[1, 4, 16, 32], 2, -1.0, 1.0)).unwrap();
        let mut ctx = Ctx::new(&mut tape, &vars, &mut f.stats, true);
        let out = f.attn.forward(&mut ctx, m, fd).unwrap();
        assert_eq!(tape.value(out.weights.unwrap()).data(), &[1.0]);
        // replay the value path by hand
        let fd1 = tape.interpolate(fd, 1, 1, Resize::Bilinear).unwrap();
        let v = f.attn.w_v.forward(&mut Ctx::new(&mut tape, &vars, &mut f.stats, true), fd1).unwrap();
        let v = tape.value(v).clone();
        let w = f.store.get(f.attn.w_out.w).clone().reshape(&[4, 32]).unwrap();
        let expect: Vec<f64> = (0..4)
            .map(|c| {
                let s: f64 = (0..32).map(|j| w.data()[c * 32 + j] * v.data()[j]).sum();
                s.max(0.0)
            })
            .collect();
        let got = tape.value(out.f_att);
        for c in 0..4 {
            for p in 0..16 * 32 {
                assert!((got.data()[c * 512 + p] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_inputs_give_constant_output() {
        let mut f = fixture(AttentionConfig::default(), 4, 8);
        let mut tape = Tape::new();
        let vars = params(&mut tape, &f.store);
        let m = tape.constant(Tensor::ones(&[1, 1, 32, 64]).unwrap()).unwrap();
        let fd_vals: Vec<f64> = (0..4).flat_map(|c| core::iter::repeat(0.3 * c as f64 - 0.4).take(32 * 64)).collect();
        let fd = tape.constant(Tensor::new(&[1, 4, 32, 64], fd_vals).unwrap()).unwrap();
        let mut ctx = Ctx::new(&mut tape, &vars, &mut f.stats, true);
        let out = f.attn.forward(&mut ctx, m, fd).unwrap();
        for plane in tape.value(out.f_att).data().chunks(32 * 64) {
            assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn permuting_locations_permutes_attention_rows() {
        // 2×2 working resolution, inputs already at that resolution
        let cfg = AttentionConfig {
            height: 2,
            width: 2,
            dim: 4,
            ..AttentionConfig::default()
        };
        let mut f = fixture(cfg, 3, 4);
        let m = random_tensor(&[1, 1, 2, 2], 4, 0.0, 1.0);
        let fd = random_tensor(&[1, 3, 2, 2], 5, -1.0, 1.0);
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor<f64>| {
            let c = t.shape()[1];
            let mut d = t.data().to_vec();
            for ch in 0..c {
                for (i, &p) in perm.iter().enumerate() {
                    d[ch * 4 + i] = t.data()[ch * 4 + p];
                }
            }
            Tensor::new(t.shape(), d).unwrap()
        };
        let weights = |m: Tensor<f64>, fd: Tensor<f64>, stats: &mut Vec<RunningStats<f64>>| {
            let mut tape = Tape::new();
            let vars = params(&mut tape, &f.store);
            let (m, fd) = (tape.constant(m).unwrap(), tape.constant(fd).unwrap());
            let out = f.attn.forward(&mut Ctx::new(&mut tape, &vars, stats, true), m, fd).unwrap();
            tape.value(out.weights.unwrap()).clone()
        };
        let a = weights(m.clone(), fd.clone(), &mut f.stats);
        let ap = weights(permute(&m), permute(&fd), &mut f.stats);
        for i in 0..4 {
            for j in 0..4 {
                assert!((ap.data()[i * 4 + j] - a.data()[perm[i] * 4 + perm[j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_shapes_range_and_gradient_flow() {
        let mut f = fixture(AttentionConfig::default(), 8, 128);
        let mut tape = Tape::new();
        let vars = params(&mut tape, &f.store);
        let a = tape.leaf(random_tensor(&[1, 8, 64, 128], 1, -1.0, 1.0), true).unwrap();
        let d = tape.leaf(random_tensor(&[1, 8, 64, 128], 2, -1.0, 1.0), true).unwrap();
        let y = f.fusion.forward(&mut Ctx::new(&mut tape, &vars, &mut f.stats, true), a, d).unwrap();
        assert_eq!(tape.shape(y), &[1, 128, 64, 128]);
        assert!(tape.value(y).data().iter().all(|&v| v >= 0.0));
        let loss = probe(&mut tape, y, 3).unwrap();
        let g = tape.backward(loss).unwrap();
        for v in [a, d] {
            let gt = g.get(v).unwrap();
            assert!(gt.dot(gt) > 0.0);
        }
    }

    #[test]
    fn disabled_attention_yields_zeros() {
        let cfg = AttentionConfig {
            enabled: false,
            ..AttentionConfig::default()
        };
        let mut f = fixture(cfg, 4, 8);
        let mut tape = Tape::new();
        let vars = params(&mut tape, &f.store);
        let m = tape.constant(Tensor::ones(&[1, 1, 16, 32]).unwrap()).unwrap();
        let fd = tape.constant(random_tensor(&[1, 4, 16, 32], 2, -1.0, 1.0)).unwrap();
        let out = f.attn.forward(&mut Ctx::new(&mut tape, &vars, &mut f.stats, true), m, fd).unwrap();
        assert!(out.weights.is_none());
        assert!(tape.value(out.f_att).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn end_to_end_gradient_at_4x8() {
        let cfg = AttentionConfig {
            height: 4,
            width: 8,
            dim: 4,
            ..AttentionConfig::default()
        };
        let f = fixture(cfg, 3, 4);
        let m = random_tensor(&[1, 1, 8, 16], 7, 0.0, 1.0);
        let fd = random_tensor(&[1, 3, 8, 16], 8, -1.0, 1.0);
        let mut inputs = f.store.values().to_vec();
        let n_params = inputs.len();
        inputs.push(fd);
        let attn = &f.attn;
        let err = check_inputs(
            |tape, vars| {
                let mut stats = Vec::new();
                let mv = tape.constant(m.clone())?;
                let out = attn.forward(&mut Ctx::new(tape, &vars[..n_params], &mut stats, true), mv, vars[n_params])?;
                probe(tape, out.f_att, 9)
            },
            &inputs,
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }
}
