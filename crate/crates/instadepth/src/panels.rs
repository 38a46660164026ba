//! The six inference panels plus raw 16-bit depth outputs.

use std::path::{Path, PathBuf};

use instadepth_core::synth::Sample;
use instadepth_core::train::Inference;
use instadepth_core::Tensor;

use crate::colormap::colorize;
use crate::dataset::{depth_image, rgb_image};
use crate::error::Result;
use crate::pnm::{write_pgm, write_ppm, RgbImage};

/// Panel file names in display order.
pub const PANELS: [&str; 6] = [
    "a_rgb.ppm",
    "b_gt_depth.ppm",
    "c_init_depth.ppm",
    "d_sparse_depth.ppm",
    "e_instance_mask.ppm",
    "f_final_depth.ppm",
];
pub const RAW_INIT: &str = "d_init.pgm";
pub const RAW_FINAL: &str = "d_final.pgm";

fn gray_rgb(m: &Tensor<f32>) -> RgbImage {
    let s = m.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    RgbImage {
        width: w,
        height: h,
        data: m
            .data()
            .iter()
            .flat_map(|&v| [(v.clamp(0.0, 1.0) * 255.0).round() as u8; 3])
            .collect(),
    }
}

/// Writes panels and raw depth maps into `dir` (which must exist) and
/// returns the paths in the order written.
pub fn write_panels(dir: &Path, sample: &Sample, inf: &Inference) -> Result<Vec<PathBuf>> {
    let p = &inf.prediction;
    let images = [
        rgb_image(&sample.rgb),
        colorize(&sample.depth_gt),
        colorize(&p.d_init),
        colorize(&inf.sparse.depth_sparse),
        gray_rgb(&p.m_seg),
        colorize(&p.d_final),
    ];
    let mut out = Vec::with_capacity(8);
    for (name, img) in PANELS.iter().zip(&images) {
        let path = dir.join(name);
        write_ppm(&path, img)?;
        out.push(path);
    }
    for (name, t) in [(RAW_INIT, &p.d_init), (RAW_FINAL, &p.d_final)] {
        let path = dir.join(name);
        write_pgm(&path, &depth_image(t))?;
        out.push(path);
    }
    Ok(out)
}
