//! Instance-mask guided depth completion without a deep-learning framework.
//!
//! The crate is `no_std` (with `alloc`) and contains everything that is pure
//! computation: a tape-based reverse-mode autodiff engine over dense tensors,
//! procedural scene synthesis, mask merging, the U-Net depth backbone, the
//! mask/depth cross-attention fusion, the squeeze-and-excitation prediction
//! head, losses, metrics, Adam and the training loop. File formats and the
//! command-line tool live in the `instadepth` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod seg;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unet;

mod kernels;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
