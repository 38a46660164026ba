//! Adam with bias correction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{invalid, mismatch, Error, Result};
use crate::params::{Checkpoint, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(invalid("adam", format!("invalid hyperparameters {cfg:?}")));
        }
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Adam {
            cfg,
            t: 0,
            m: zeros()?,
            v: zeros()?,
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(invalid(
                "adam",
                format!("{} grads / {} moments for {} params", grads.len(), self.m.len(), params.len()),
            ));
        }
        for ((p, g), m) in params.values().iter().zip(grads).zip(&self.m) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(mismatch("adam", g.shape(), p.shape()));
                }
            }
            if m.shape() != p.shape() {
                return Err(mismatch("adam", m.shape(), p.shape()));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - Float::powi(beta1, self.t as i32);
        let bc2 = 1.0 - Float::powi(beta2, self.t as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].as_ref().map(Tensor::data);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j].as_f64());
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let update = lr * (mj / bc1) / (Float::sqrt(vj / bc2) + eps);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }

    /// Moment tensors named after their parameters.
    pub fn export(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (name, m) in params.names().iter().zip(&self.m) {
            out.push((format!("adam.m.{name}"), m.clone()));
        }
        for (name, v) in params.names().iter().zip(&self.v) {
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out
    }

    /// Restores moments from a checkpoint whose step counter is the Adam
    /// step count.
    pub fn import(cfg: AdamConfig, params: &ParamStore<T>, ck: &Checkpoint<T>) -> Result<Self> {
        let mut adam = Adam::new(cfg, params)?;
        for (i, name) in params.names().iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut adam.m[i]), ("adam.v.", &mut adam.v[i])] {
                let key = format!("{prefix}{name}");
                let t = ck.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("{key}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
                }
                *slot = t.clone();
            }
        }
        adam.t = ck.step;
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, -2.0, 50.0] {
            let mut p = scalar_store(1.0);
            let mut adam = Adam::new(AdamConfig::default(), &p).unwrap();
            adam.step(&mut p, &[Some(Tensor::scalar(g))]).unwrap();
            let delta = p.values()[0].item() - 1.0;
            assert!((delta.abs() - 1e-4).abs() < 1e-8, "{delta}");
            assert!(delta.signum() == -g.signum());
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = scalar_store(3.0);
        let mut adam = Adam::new(AdamConfig::default(), &p).unwrap();
        for _ in 0..5 {
            adam.step(&mut p, &[None]).unwrap();
            adam.step(&mut p, &[Some(Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(p.values()[0].item(), 3.0);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p).unwrap();
        for _ in 0..200 {
            let x = p.values()[0].item();
            adam.step(&mut p, &[Some(Tensor::scalar(2.0 * x))]).unwrap();
        }
        assert!(p.values()[0].item().abs() < 0.05);
    }

    #[test]
    fn shape_mismatch_and_state_round_trip() {
        let mut p = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p).unwrap();
        assert!(adam.step(&mut p, &[Some(Tensor::zeros(&[2]).unwrap())]).is_err());
        assert!(adam.step(&mut p, &[]).is_err());
        adam.step(&mut p, &[Some(Tensor::scalar(0.3))]).unwrap();
        let ck = Checkpoint {
            config: String::new(),
            step: adam.steps(),
            tensors: adam.export(&p),
        };
        assert_eq!(Adam::import(adam.cfg, &p, &ck).unwrap(), adam);
        let empty = Checkpoint {
            config: String::new(),
            step: 0,
            tensors: vec![],
        };
        assert!(Adam::import(adam.cfg, &p, &empty).is_err());
    }
}
