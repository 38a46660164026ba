//! MAE and RMSE over pixels with positive ground truth.

use num_traits::Float;

use crate::error::{mismatch, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub n_valid: usize,
}

impl Metrics {
    /// Same metrics in other units (e.g. 100 for centimeters).
    pub fn scaled(self, factor: f64) -> Metrics {
        Metrics {
            mae: self.mae * factor,
            rmse: self.rmse * factor,
            n_valid: self.n_valid,
        }
    }
}

/// Running sums for aggregating over many samples; the aggregate MAE is the
/// valid-pixel-weighted mean of per-sample MAEs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    sum_abs: f64,
    sum_sq: f64,
    n: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one prediction and returns its own metrics.
    pub fn add<T: Real>(&mut self, pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Metrics> {
        let m = evaluate(pred, gt)?;
        self.sum_abs += m.mae * m.n_valid as f64;
        self.sum_sq += m.rmse * m.rmse * m.n_valid as f64;
        self.n += m.n_valid;
        Ok(m)
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.n == 0 {
            return Err(Error::NoValidPixels);
        }
        let n = self.n as f64;
        Ok(Metrics {
            mae: self.sum_abs / n,
            rmse: Float::sqrt(self.sum_sq / n),
            n_valid: self.n,
        })
    }
}

/// MAE and RMSE of `pred` against `gt` over `{gt > 0}`, in `gt`'s units.
pub fn evaluate<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Metrics> {
    if pred.len() != gt.len() || pred.shape() != gt.shape() {
        return Err(mismatch("evaluate", pred.shape(), gt.shape()));
    }
    let (mut sa, mut ss, mut n) = (0.0f64, 0.0f64, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g > T::zero() {
            let e = p.as_f64() - g.as_f64();
            sa += e.abs();
            ss += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(Metrics {
        mae: sa / n as f64,
        rmse: Float::sqrt(ss / n as f64),
        n_valid: n,
    })
}
