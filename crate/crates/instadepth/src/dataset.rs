//! On-disk sample directories and the train/val split file.
//!
//! A sample lives in `<root>/<scene_id>/` as `rgb.ppm`, `depth.pgm` (16-bit,
//! centimeters, 0 = no return), `inst_000.pgm`… (8-bit, 0/255) and a
//! `manifest.txt` of `key=value` lines. Real frames converted to this layout
//! load the same way as generated ones.

use std::fs;
use std::path::{Path, PathBuf};

use instadepth_core::synth::{generate_scene, mix_seed, split, Sample};
use instadepth_core::Tensor;

use crate::error::{format_err, io_err, Error, Result};
use crate::pnm::{read_pgm, read_ppm, write_pgm, write_ppm, GrayImage, RgbImage};

pub const MANIFEST: &str = "manifest.txt";
pub const SPLIT_FILE: &str = "split.txt";

/// Meters to 16-bit centimeters, saturating.
pub fn depth_to_cm(d: f32) -> u16 {
    (f64::from(d) * 100.0).round().clamp(0.0, 65535.0) as u16
}

pub fn cm_to_depth(v: u16) -> f32 {
    (f64::from(v) / 100.0) as f32
}

/// 1×H×W (or 1×1×H×W) meters to a 16-bit PGM.
pub fn depth_image(t: &Tensor<f32>) -> GrayImage {
    let (h, w) = hw(t);
    GrayImage::new(w, h, 65535, t.data().iter().map(|&d| depth_to_cm(d)).collect())
}

fn hw(t: &Tensor<f32>) -> (usize, usize) {
    let s = t.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// 3×H×W in [0, 1] to interleaved 8-bit RGB.
pub fn rgb_image(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = hw(t);
    let hw = h * w;
    let src = t.data();
    let data = (0..hw).flat_map(|i| (0..3).map(move |c| to_u8(src[c * hw + i]))).collect();
    RgbImage { width: w, height: h, data }
}

pub fn mask_image(t: &Tensor<f32>) -> GrayImage {
    let (h, w) = hw(t);
    GrayImage::new(w, h, 255, t.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect())
}

/// Writes one sample below `root` and returns the files written.
pub fn write_sample(root: &Path, sample: &Sample) -> Result<Vec<PathBuf>> {
    let dir = root.join(&sample.scene_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut written = Vec::new();
    let rgb = dir.join("rgb.ppm");
    write_ppm(&rgb, &rgb_image(&sample.rgb))?;
    written.push(rgb);
    let depth = dir.join("depth.pgm");
    write_pgm(&depth, &depth_image(&sample.depth_gt))?;
    written.push(depth);
    for (i, m) in sample.instances.iter().enumerate() {
        let p = dir.join(format!("inst_{i:03}.pgm"));
        write_pgm(&p, &mask_image(m))?;
        written.push(p);
    }
    let manifest = dir.join(MANIFEST);
    let text = format!(
        "scene={}\ncondition={}\nrgb=rgb.ppm\ndepth=depth.pgm\ninstances={}\n",
        sample.scene_id,
        sample.condition,
        sample.instances.len()
    );
    fs::write(&manifest, text).map_err(io_err(&manifest))?;
    written.push(manifest);
    Ok(written)
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv<'a>(text: &'a str, path: &Path) -> Result<Vec<(&'a str, &'a str)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| format_err(path, "line", format!("expected key=value, got {l:?}")))
        })
        .collect()
}

/// 8-bit binary mask (0 or maxval) as a 1×H×W tensor.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = read_pgm(path)?;
    if img.maxval > 255 {
        return Err(format_err(path, "maxval", "masks must be 8-bit"));
    }
    if img.data.iter().any(|&v| v != 0 && v != img.maxval) {
        return Err(format_err(path, "raster", format!("mask values must be 0 or {}", img.maxval)));
    }
    let data = img.data.iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(&[1, img.height, img.width], data)?)
}

pub fn read_sample(dir: &Path) -> Result<Sample> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let kv = parse_kv(&text, &mpath)?;
    let get = |key: &'static str| {
        kv.iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| format_err(&mpath, key, "missing"))
    };
    if let Some((k, _)) = kv.iter().find(|(k, _)| !["scene", "condition", "rgb", "depth", "instances"].contains(k)) {
        return Err(format_err(&mpath, "key", format!("unknown key {k:?}")));
    }
    let n: usize = get("instances")?
        .parse()
        .map_err(|_| format_err(&mpath, "instances", "not a count"))?;

    let rgb_path = dir.join(get("rgb")?);
    let rgb = read_ppm(&rgb_path)?;
    let (h, w) = (rgb.height, rgb.width);
    let hw = h * w;
    let mut planar = vec![0.0f32; 3 * hw];
    for (i, px) in rgb.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * hw + i] = f32::from(px[c]) / 255.0;
        }
    }

    let depth_path = dir.join(get("depth")?);
    let depth = read_pgm(&depth_path)?;
    if (depth.height, depth.width) != (h, w) {
        return Err(format_err(&depth_path, "width", format!("{}x{} differs from rgb {w}x{h}", depth.width, depth.height)));
    }
    if depth.maxval != 65535 {
        return Err(format_err(&depth_path, "maxval", "depth must be 16-bit (maxval 65535)"));
    }
    let depth_gt = depth.data.iter().map(|&v| cm_to_depth(v)).collect();

    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let p = dir.join(format!("inst_{i:03}.pgm"));
        let m = read_mask(&p)?;
        if m.shape() != [1, h, w] {
            return Err(format_err(&p, "width", format!("mask extent differs from rgb {w}x{h}")));
        }
        instances.push(m);
    }
    let sample = Sample {
        rgb: Tensor::new(&[3, h, w], planar)?,
        depth_gt: Tensor::new(&[1, h, w], depth_gt)?,
        instances,
        scene_id: get("scene")?.to_string(),
        condition: get("condition")?.to_string(),
    };
    sample.validate()?;
    Ok(sample)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Split {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for id in &self.train {
            s.push_str(&format!("train {id}\n"));
        }
        for id in &self.val {
            s.push_str(&format!("val {id}\n"));
        }
        s
    }
}

pub fn write_split(root: &Path, split: &Split) -> Result<PathBuf> {
    let p = root.join(SPLIT_FILE);
    fs::write(&p, split.to_text()).map_err(io_err(&p))?;
    Ok(p)
}

pub fn read_split(root: &Path) -> Result<Split> {
    let p = root.join(SPLIT_FILE);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let mut split = Split::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        match line.split_once(char::is_whitespace) {
            Some(("train", id)) => split.train.push(id.trim().to_string()),
            Some(("val", id)) => split.val.push(id.trim().to_string()),
            _ => return Err(format_err(&p, "line", format!("expected `train|val <id>`, got {line:?}"))),
        }
    }
    if split.train.is_empty() {
        return Err(format_err(&p, "train", "no training samples listed"));
    }
    Ok(split)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn load_dataset(root: &Path) -> Result<(Split, LoadedSplit)> {
    let split = read_split(root)?;
    let load = |ids: &[String]| ids.iter().map(|id| read_sample(&root.join(id))).collect::<Result<Vec<_>>>();
    let loaded = LoadedSplit {
        train: load(&split.train)?,
        val: load(&split.val)?,
    };
    Ok((split, loaded))
}

/// Options of the procedural dataset generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenOptions {
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub objects: usize,
}

/// Scene `i` of a generated dataset; ids are `scene_00000`, `scene_00001`…
pub fn generated_scene(opts: &GenOptions, i: usize) -> Result<Sample> {
    let mut s = generate_scene(mix_seed(opts.seed, i as u64), opts.height, opts.width, opts.objects)?;
    s.scene_id = format!("scene_{i:05}");
    Ok(s)
}

/// Writes `count` scenes and the 80/20 split file; returns every file written.
pub fn generate_dataset(root: &Path, opts: &GenOptions) -> Result<Vec<PathBuf>> {
    if opts.count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut written = Vec::new();
    let mut ids = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let s = generated_scene(opts, i)?;
        written.extend(write_sample(root, &s)?);
        ids.push(s.scene_id);
    }
    let (tr, va) = split(opts.count);
    let split = Split {
        train: ids[tr].to_vec(),
        val: ids[va].to_vec(),
    };
    written.push(write_split(root, &split)?);
    Ok(written)
}
