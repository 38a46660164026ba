//! Depth supervision: foreground-weighted masked regression losses.

use alloc::format;
use core::str::FromStr;

use num_traits::Float;

use crate::error::{invalid, mismatch, Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
    L2,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            _ => Err(invalid("loss", format!("unknown loss kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_init: f64,
    pub lambda_obj: f64,
    pub lambda_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_init: 0.5,
            lambda_obj: 3.0,
            lambda_seg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lambda_init", self.lambda_init),
            ("lambda_obj", self.lambda_obj),
            ("lambda_seg", self.lambda_seg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-pixel weights normalized to sum 1 over the valid set `gt > 0`:
/// `1 + (lambda_obj - 1) · mask` on valid pixels, 0 elsewhere.
pub fn pixel_weights<T: Real>(gt: &Tensor<T>, mask: &Tensor<T>, lambda_obj: f64) -> Result<Tensor<T>> {
    if gt.shape() != mask.shape() {
        return Err(mismatch("masked_loss", gt.shape(), mask.shape()));
    }
    let raw: alloc::vec::Vec<f64> = gt
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&g, &m)| if g > T::zero() { 1.0 + (lambda_obj - 1.0) * m.as_f64() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    if !gt.data().iter().any(|&g| g > T::zero()) {
        return Err(Error::NoValidPixels);
    }
    if !(total > 0.0) {
        return Err(invalid("masked_loss", "pixel weights sum to zero"));
    }
    Tensor::new(gt.shape(), raw.iter().map(|&w| T::from_f64(w / total)).collect())
}

/// `Σ w·ρ(pred − gt) / Σ w` over valid pixels, ρ = |·| or (·)².
pub fn masked_weighted_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: &Tensor<T>,
    mask: &Tensor<T>,
    lambda_obj: f64,
    kind: LossKind,
) -> Result<Var> {
    if tape.shape(pred) != gt.shape() {
        return Err(mismatch("masked_loss", tape.shape(pred), gt.shape()));
    }
    let w = pixel_weights(gt, mask, lambda_obj)?;
    let g = tape.constant(gt.clone())?;
    let w = tape.constant(w)?;
    let r = tape.sub(pred, g)?;
    let r = match kind {
        LossKind::L1 => tape.abs(r)?,
        LossKind::L2 => tape.square(r)?,
    };
    let r = tape.mul(r, w)?;
    tape.sum(r)
}

pub fn masked_weighted_l1<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: &Tensor<T>,
    mask: &Tensor<T>,
    lambda_obj: f64,
) -> Result<Var> {
    masked_weighted_loss(tape, pred, gt, mask, lambda_obj, LossKind::L1)
}

/// Mean binary cross-entropy of a soft mask against a binary target. Terms
/// whose target coefficient is zero are skipped, so a mask equal to its
/// binary target scores exactly 0.
pub fn mask_bce<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(mismatch("mask_bce", pred.shape(), target.shape()));
    }
    const FLOOR: f64 = 1e-7;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let (p, y) = (p.as_f64(), y.as_f64());
            let mut l = 0.0;
            if y > 0.0 {
                l -= y * Float::ln(p.max(FLOOR));
            }
            if y < 1.0 {
                l -= (1.0 - y) * Float::ln((1.0 - p).max(FLOOR));
            }
            l
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Loss graph plus its monitored components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub final_term: Var,
    pub init_term: Option<Var>,
    /// Mask consistency term; outside the gradient path.
    pub seg: f64,
}

/// `L = ρ(d_final) + λ_init·ρ(d_init) + λ_seg·L_seg`. The initial-depth term
/// is left out of the graph entirely when `λ_init = 0`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    d_init: Var,
    d_final: Var,
    gt: &Tensor<T>,
    m_seg: &Tensor<T>,
    m_foreground: &Tensor<T>,
    weights: &LossWeights,
    kind: LossKind,
) -> Result<LossParts> {
    let final_term = masked_weighted_loss(tape, d_final, gt, m_seg, weights.lambda_obj, kind)?;
    let mut total = final_term;
    let mut init_term = None;
    if weights.lambda_init > 0.0 {
        let li = masked_weighted_loss(tape, d_init, gt, m_seg, weights.lambda_obj, kind)?;
        let scaled = tape.scale(li, T::from_f64(weights.lambda_init))?;
        total = tape.add(total, scaled)?;
        init_term = Some(li);
    }
    let seg = mask_bce(m_seg, m_foreground)?;
    if weights.lambda_seg * seg > 0.0 {
        let c = tape.constant(Tensor::scalar(T::from_f64(weights.lambda_seg * seg)))?;
        total = tape.add(total, c)?;
    }
    Ok(LossParts {
        total,
        final_term,
        init_term,
        seg,
    })
}
