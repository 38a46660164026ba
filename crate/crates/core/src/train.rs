//! Training loop, validation and single-sample inference.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{invalid, mismatch, Error, Result};
use crate::loss::total_loss;
use crate::metrics::{Metrics, MetricsAccumulator};
use crate::model::{Batch, DepthNet, ModelConfig};
use crate::optim::Adam;
use crate::params::Checkpoint;
use crate::seg::{merge_masks, resize_mask};
use crate::synth::{mix_seed, sparsify, Sample, SparseInput};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::unet::stack_input;

const TRAIN_TAG: u64 = 0x7472_6169_6e;
const VAL_TAG: u64 = 0x76_616c;
const ORDER_TAG: u64 = 0x6f72_6465_72;
/// Keys a resumed run may change.
const RESUMABLE: &[&str] = &["epochs", "max_steps", "log_every", "metric_unit"];

/// A sample together with the instance masks the mask provider produced for
/// it. With ground-truth masks the two sets coincide.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sample: Sample,
    pub masks: Vec<Tensor<f32>>,
}

impl Example {
    pub fn ground_truth(sample: Sample) -> Self {
        let masks = sample.instances.clone();
        Example { sample, masks }
    }

    /// Merged prior resized to `h×w` (1×1×h×w) and the merged ground-truth
    /// foreground at sample resolution (1×1×H×W).
    pub fn masks_at(&self, h: usize, w: usize, cfg: &ModelConfig) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (sh, sw) = (self.sample.height(), self.sample.width());
        let prior: Vec<&Tensor<f32>> = self.masks.iter().collect();
        let merged = merge_masks(&prior, sh, sw)?;
        let m_seg = resize_mask(&merged, h, w, cfg.mask_resize)?;
        let gt: Vec<&Tensor<f32>> = self.sample.instances.iter().collect();
        let fg = merge_masks(&gt, sh, sw)?.reshape(&[1, 1, sh, sw])?;
        Ok((m_seg, fg))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Builds a network batch from examples and their sparse inputs.
pub fn assemble(cfg: &ModelConfig, items: &[(&Example, &SparseInput)]) -> Result<Batch<f32>> {
    if items.is_empty() {
        return Err(invalid("assemble", "empty batch"));
    }
    let (h, w) = (cfg.height, cfg.width);
    let (mut rgb, mut depth, mut valid, mut gt, mut m_seg, mut fg) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for (ex, sp) in items {
        let s = &ex.sample;
        if (s.height(), s.width()) != (h, w) {
            return Err(mismatch("assemble", &[s.height(), s.width()], &[h, w]));
        }
        rgb.extend_from_slice(s.rgb.data());
        depth.extend_from_slice(sp.depth_sparse.data());
        valid.extend_from_slice(sp.validity.data());
        gt.extend_from_slice(s.depth_gt.data());
        let (m, f) = ex.masks_at(h, w, cfg)?;
        m_seg.extend_from_slice(m.data());
        fg.extend_from_slice(f.data());
    }
    let b = items.len();
    let one = [b, 1, h, w];
    let input = stack_input(
        &Tensor::new(&[b, 3, h, w], rgb)?,
        &Tensor::new(&one, depth)?,
        &Tensor::new(&one, valid)?,
        cfg.unet.depth_scale,
    )?;
    Ok(Batch {
        input,
        m_seg: Tensor::new(&one, m_seg)?,
        gt: Tensor::new(&one, gt)?,
        foreground: Tensor::new(&one, fg)?,
    })
}

/// Loss values of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub final_term: f64,
    pub init_term: Option<f64>,
    pub seg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    /// Validation metrics of the final and initial depth, in the configured unit.
    pub val: Metrics,
    pub val_init: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<LogRecord>,
    /// Training loss of every step run, in order.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: Config,
    model: DepthNet<f32>,
    adam: Adam<f32>,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let model = DepthNet::new(&cfg.model(), cfg.seed)?;
        let adam = Adam::new(cfg.adam(), model.params())?;
        Ok(Trainer { cfg, model, adam })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`]; the
    /// embedded config is authoritative.
    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<Self> {
        let cfg = Config::parse(&ck.config)?;
        let mut t = Trainer::new(cfg)?;
        t.model.import(ck)?;
        t.adam = Adam::import(t.cfg.adam(), t.model.params(), ck)?;
        Ok(t)
    }

    /// Like [`Trainer::from_checkpoint`] but continues under `cfg`, which may
    /// only differ from the stored config in the step budget and logging.
    pub fn resume(ck: &Checkpoint<f32>, cfg: Config) -> Result<Self> {
        let mut t = Trainer::from_checkpoint(ck)?;
        cfg.validate()?;
        let changed: Vec<&str> = Config::keys()
            .iter()
            .copied()
            .filter(|k| !RESUMABLE.contains(k) && cfg.get(k) != t.cfg.get(k))
            .collect();
        if !changed.is_empty() {
            return Err(Error::Config(format!("a resumed run cannot change {}", changed.join(", "))));
        }
        t.cfg = cfg;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        let mut tensors = self.model.export();
        tensors.extend(self.adam.export(self.model.params()));
        Checkpoint {
            config: self.cfg.to_text(),
            step: self.adam.steps(),
            tensors,
        }
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn model(&self) -> &DepthNet<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut DepthNet<f32> {
        &mut self.model
    }

    /// Optimization steps taken so far, including those before a resume.
    pub fn step(&self) -> u64 {
        self.adam.steps()
    }

    /// Forward, loss, backward and one Adam update. Errors carry the step
    /// number and the first operation that produced a non-finite value.
    pub fn train_step(&mut self, batch: &Batch<f32>) -> Result<StepStats> {
        let step = self.step() + 1;
        self.try_step(batch).map_err(|e| match e {
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::Diverged {
                step,
                cause: Box::new(e),
            },
            e => e,
        })
    }

    fn try_step(&mut self, batch: &Batch<f32>) -> Result<StepStats> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape)?;
        let out = self.model.forward(&mut tape, &vars, batch, true)?;
        let parts = total_loss(
            &mut tape,
            out.d_init,
            out.d_final,
            &batch.gt,
            &batch.m_seg,
            &batch.foreground,
            &self.cfg.loss_weights(),
            self.cfg.loss,
        )?;
        let stats = StepStats {
            loss: tape.value(parts.total).item() as f64,
            final_term: tape.value(parts.final_term).item() as f64,
            init_term: parts.init_term.map(|v| tape.value(v).item() as f64),
            seg: parts.seg,
        };
        let mut g = tape.backward(parts.total)?;
        let mut grads = Vec::with_capacity(vars.len());
        for (v, name) in vars.iter().zip(self.model.params().names()) {
            let t = g.take(*v);
            if t.as_ref().is_some_and(|t| !t.all_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            grads.push(t);
        }
        self.adam.step(self.model.params_mut(), &grads)?;
        Ok(stats)
    }
}

/// Sparse input of the `index`-th example of a split. Fixed per sample
/// unless `resample_sparsity` is set, in which case it changes each epoch.
pub fn sparse_for(cfg: &Config, ex: &Example, val: bool, index: usize, epoch: u64) -> Result<SparseInput> {
    let tag = if val { VAL_TAG } else { TRAIN_TAG };
    let mut seed = mix_seed(mix_seed(cfg.seed, tag), index as u64);
    if cfg.resample_sparsity && !val {
        seed = mix_seed(seed, epoch);
    }
    sparsify(&ex.sample, cfg.keep_prob, seed)
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, ORDER_TAG), epoch));
    order.shuffle(&mut rng);
    order
}

/// Example indices of the batch consumed at zero-based `step`. The order is
/// a per-epoch shuffle that depends only on the seed.
pub fn batch_indices(cfg: &Config, n: usize, step: u64) -> Vec<(usize, u64)> {
    let bs = cfg.batch_size as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..bs)
        .map(|j| {
            let k = step * bs + j;
            let epoch = k / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_order(cfg.seed, epoch, n)));
            }
            let order = &cached.as_ref().expect("just set").1;
            (order[(k % n as u64) as usize], epoch)
        })
        .collect()
}

/// Eval-mode metrics of the final and initial depth over a split, in meters.
pub fn evaluate_split(model: &mut DepthNet<f32>, cfg: &Config, examples: &[Example], val: bool) -> Result<(Metrics, Metrics)> {
    let (mut fin, mut init) = (MetricsAccumulator::new(), MetricsAccumulator::new());
    for (i, ex) in examples.iter().enumerate() {
        let sp = sparse_for(cfg, ex, val, i, 0)?;
        let out = predict(model, ex, &sp)?;
        fin.add(&out.d_final, &out.gt)?;
        init.add(&out.d_init, &out.gt)?;
    }
    Ok((fin.finish()?, init.finish()?))
}

/// Runs until the configured step budget; `observer` sees every log record
/// as it is produced. Validation falls back to the training split when the
/// validation split is empty.
pub fn train_loop(trainer: &mut Trainer, data: &Dataset, mut observer: impl FnMut(&LogRecord)) -> Result<History> {
    let n = data.train.len();
    if n == 0 {
        return Err(invalid("train_loop", "no training samples"));
    }
    let cfg = trainer.cfg.clone();
    let mcfg = cfg.model();
    let (eval_set, eval_is_val) = if data.val.is_empty() {
        (&data.train, false)
    } else {
        (&data.val, true)
    };
    let total = cfg.total_steps(n);
    let unit = cfg.metric_unit.factor();
    let mut history = History::default();
    while trainer.step() < total {
        let s = trainer.step();
        let picks = batch_indices(&cfg, n, s);
        let sparse = picks
            .iter()
            .map(|&(i, epoch)| sparse_for(&cfg, &data.train[i], false, i, epoch))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<(&Example, &SparseInput)> = picks.iter().zip(&sparse).map(|(&(i, _), sp)| (&data.train[i], sp)).collect();
        let batch = assemble(&mcfg, &items)?;
        let stats = trainer.train_step(&batch)?;
        history.losses.push(stats.loss);
        let step = s + 1;
        if step % cfg.log_every == 0 || step == total {
            let (val, val_init) = evaluate_split(&mut trainer.model, &cfg, eval_set, eval_is_val)?;
            let rec = LogRecord {
                step,
                loss: stats.loss,
                val: val.scaled(unit),
                val_init: val_init.scaled(unit),
            };
            observer(&rec);
            history.records.push(rec);
        }
    }
    Ok(history)
}

/// Everything inference produces for one sample; tensors are 1×1×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub d_init: Tensor<f32>,
    pub d_final: Tensor<f32>,
    pub m_seg: Tensor<f32>,
    pub gt: Tensor<f32>,
}

/// Eval-mode forward pass for one example and a given sparse input.
pub fn predict(model: &mut DepthNet<f32>, ex: &Example, sparse: &SparseInput) -> Result<Prediction> {
    let cfg = model.config().clone();
    let batch = assemble(&cfg, &[(ex, sparse)])?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let out = model.forward(&mut tape, &vars, &batch, false)?;
    Ok(Prediction {
        d_init: tape.value(out.d_init).clone(),
        d_final: tape.value(out.d_final).clone(),
        m_seg: batch.m_seg,
        gt: batch.gt,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub prediction: Prediction,
    pub sparse: SparseInput,
    /// Metrics of the final depth, in meters.
    pub metrics: Metrics,
    pub init_metrics: Metrics,
}

/// Sparsifies `ex` with `keep_prob`/`seed` and predicts in eval mode.
pub fn infer(model: &mut DepthNet<f32>, ex: &Example, keep_prob: f64, seed: u64) -> Result<Inference> {
    let sparse = sparsify(&ex.sample, keep_prob, seed)?;
    let prediction = predict(model, ex, &sparse)?;
    let metrics = crate::metrics::evaluate(&prediction.d_final, &prediction.gt)?;
    let init_metrics = crate::metrics::evaluate(&prediction.d_init, &prediction.gt)?;
    Ok(Inference {
        prediction,
        sparse,
        metrics,
        init_metrics,
    })
}

/// Checks that a checkpoint's tensors fit the network its config describes.
pub fn load_model(ck: &Checkpoint<f32>) -> Result<(Config, DepthNet<f32>)> {
    let cfg = Config::parse(&ck.config)?;
    cfg.validate()?;
    let mut model = DepthNet::new(&cfg.model(), cfg.seed)?;
    model
        .import(ck)
        .map_err(|e| Error::Checkpoint(format!("does not match its config: {e}")))?;
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scene;

    fn tiny() -> Config {
        let mut c = Config::desk();
        c.height = 32;
        c.width = 64;
        c.enc_channels = [4, 4, 8, 8, 8];
        c.feature_channels = 4;
        c.attention_dim = 8;
        c.attention_height = 4;
        c.attention_width = 8;
        c.fusion_channels = 16;
        c.head_channels = 8;
        c.batch_size = 2;
        c.max_steps = 6;
        c.log_every = 3;
        c.learning_rate = 1e-3;
        c
    }

    fn data(c: &Config, n: usize) -> Dataset {
        let ex = |s| Example::ground_truth(generate_scene(s, c.height, c.width, 3).unwrap());
        Dataset {
            train: (0..n as u64).map(ex).collect(),
            val: vec![ex(100)],
        }
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let c = tiny();
        let mut seen = vec![];
        for s in 0..5 {
            seen.extend(batch_indices(&c, 5, s).into_iter().map(|(i, _)| i));
        }
        for epoch in seen.chunks(5) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, [0, 1, 2, 3, 4]);
        }
        assert_eq!(batch_indices(&c, 5, 3), batch_indices(&c, 5, 3));
    }

    #[test]
    fn runs_are_deterministic_and_resume_continues() {
        let c = tiny();
        let d = data(&c, 3);
        let run = || {
            let mut t = Trainer::new(c.clone()).unwrap();
            let h = train_loop(&mut t, &d, |_| {}).unwrap();
            (h, t.checkpoint())
        };
        let (h1, ck1) = run();
        let (h2, ck2) = run();
        assert_eq!(h1, h2);
        assert_eq!(ck1.encode(), ck2.encode());
        assert_eq!(h1.records.iter().map(|r| r.step).collect::<Vec<_>>(), [3, 6]);
        assert_eq!(ck1.step, 6);

        // stop at 3, resume to 6: same end state as the uninterrupted run
        let mut short = c.clone();
        short.max_steps = 3;
        let mut t = Trainer::new(short).unwrap();
        train_loop(&mut t, &d, |_| {}).unwrap();
        let ck = Checkpoint::decode(&t.checkpoint().encode()).unwrap();
        let mut other = c.clone();
        other.learning_rate *= 2.0;
        assert!(matches!(Trainer::resume(&ck, other), Err(Error::Config(m)) if m.contains("learning_rate")));
        let mut t = Trainer::resume(&ck, c.clone()).unwrap();
        assert_eq!(t.step(), 3);
        let h = train_loop(&mut t, &d, |_| {}).unwrap();
        assert_eq!(h.losses, h1.losses[3..]);
        assert_eq!(t.checkpoint().encode(), ck1.encode());
    }

    #[test]
    fn divergence_names_step_and_op() {
        let c = tiny();
        let d = data(&c, 2);
        let mut t = Trainer::new(c.clone()).unwrap();
        let name = t.model().params().names()[0].clone();
        let id = t.model().params().find(&name).unwrap();
        // finite weights whose products overflow inside the first conv
        t.model_mut().params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = f32::MAX);
        let err = train_loop(&mut t, &d, |_| {}).unwrap_err();
        match err {
            Error::Diverged { step, cause } => {
                assert_eq!(step, 1);
                assert!(matches!(*cause, Error::NonFinite { op: "conv2d", .. }), "{cause}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn inference_outputs_and_metrics() {
        let c = tiny();
        let ex = Example::ground_truth(generate_scene(4, 32, 64, 2).unwrap());
        let mut m = DepthNet::new(&c.model(), 0).unwrap();
        let a = infer(&mut m, &ex, 0.05, 1).unwrap();
        for t in [&a.prediction.d_init, &a.prediction.d_final, &a.prediction.m_seg] {
            assert_eq!(t.shape(), &[1, 1, 32, 64]);
        }
        assert_eq!(a.metrics, crate::metrics::evaluate(&a.prediction.d_final, &ex.sample.depth_gt.clone().reshape(&[1, 1, 32, 64]).unwrap()).unwrap());
        assert_eq!(a, infer(&mut m, &ex, 0.05, 1).unwrap());
        let wrong = Example::ground_truth(generate_scene(4, 64, 64, 2).unwrap());
        assert!(infer(&mut m, &wrong, 0.05, 1).is_err());
    }

    #[test]
    fn checkpoint_config_mismatch_is_rejected() {
        let c = tiny();
        let t = Trainer::new(c.clone()).unwrap();
        let mut ck = t.checkpoint();
        let (cfg, _) = load_model(&ck).unwrap();
        assert_eq!(cfg, c);
        let mut other = c.clone();
        other.fusion_channels = 32;
        ck.config = other.to_text();
        assert!(matches!(load_model(&ck), Err(Error::Checkpoint(_))));
    }
}
