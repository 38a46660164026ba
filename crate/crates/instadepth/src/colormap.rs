//! Fixed depth colormap shipped as `assets/depth_colormap.txt`.

use std::sync::OnceLock;

use instadepth_core::Tensor;

use crate::pnm::RgbImage;

/// Upper end of the color scale, in meters.
pub const MAX_DEPTH: f32 = 80.0;

const ASSET: &str = include_str!("../assets/depth_colormap.txt");

fn parse(text: &str) -> Vec<[u8; 3]> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let v: Vec<u8> = l.split_whitespace().map(|t| t.parse().expect("colormap entry")).collect();
            [v[0], v[1], v[2]]
        })
        .collect()
}

pub fn table() -> &'static [[u8; 3]; 256] {
    static TABLE: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    TABLE.get_or_init(|| parse(ASSET).try_into().expect("colormap asset must have 256 entries"))
}

/// Color of one depth; non-positive depth is black.
pub fn color(d: f32) -> [u8; 3] {
    if !(d > 0.0) {
        return [0, 0, 0];
    }
    let i = ((d / MAX_DEPTH).clamp(0.0, 1.0) * 255.0).round() as usize;
    table()[i]
}

/// Colorizes an `…×H×W` single-channel depth map.
pub fn colorize(depth: &Tensor<f32>) -> RgbImage {
    let s = depth.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    RgbImage {
        width: w,
        height: h,
        data: depth.data().iter().flat_map(|&d| color(d)).collect(),
    }
}
