//! Merged foreground prior from per-instance masks.

use alloc::format;

use crate::error::{invalid, mismatch, Result};
use crate::kernels;
use crate::real::Real;
use crate::tape::Resize;
use crate::tensor::Tensor;

/// Pixelwise maximum over 1×H×W masks. An empty list yields zeros of the
/// given extents.
pub fn merge_masks<T: Real>(instances: &[&Tensor<T>], h: usize, w: usize) -> Result<Tensor<T>> {
    let mut out = Tensor::<T>::zeros(&[1, h, w])?;
    for m in instances {
        if m.shape() != [1, h, w] {
            return Err(mismatch("merge_masks", m.shape(), &[1, h, w]));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Resizes a 1×H×W (or B×1×H×W) mask to B×1×H'×W'. Nearest keeps binary
/// masks binary; bilinear yields soft occupancy.
pub fn resize_mask<T: Real>(m: &Tensor<T>, out_h: usize, out_w: usize, mode: Resize) -> Result<Tensor<T>> {
    let (b, h, w) = match *m.shape() {
        [1, h, w] => (1, h, w),
        [b, 1, h, w] => (b, h, w),
        _ => return Err(invalid("resize_mask", format!("expected 1×H×W or B×1×H×W, got {:?}", m.shape()))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(invalid("resize_mask", "target extents must be positive"));
    }
    let (py, px) = match mode {
        Resize::Nearest => (kernels::nearest_plan(h, out_h), kernels::nearest_plan(w, out_w)),
        Resize::Bilinear => (kernels::linear_plan(h, out_h), kernels::linear_plan(w, out_w)),
    };
    let data = kernels::resample_forward(m.data(), b, (h, w), &py, &px);
    Tensor::new(&[b, 1, out_h, out_w], data)
}

/// Fraction of pixels at or above 0.5.
pub fn foreground_fraction<T: Real>(m: &Tensor<T>) -> f64 {
    let half = T::from_f64(0.5);
    m.data().iter().filter(|&&v| v >= half).count() as f64 / m.len() as f64
}
