//! Where instance masks come from: the sample itself, or files exported by an
//! external detector.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use instadepth_core::synth::Sample;
use instadepth_core::train::Example;

use crate::dataset::read_mask;
use crate::error::{format_err, io_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskProvider {
    GroundTruth,
    /// `{scene}` in the pattern is replaced by the scene id. The result is
    /// either one 8-bit PGM or a directory whose `*.pgm` files are read in
    /// name order; an empty directory means nothing was detected.
    File(String),
}

impl FromStr for MaskProvider {
    type Err = Error;

    /// `gt` or `file:<pattern>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" | "ground_truth" => Ok(MaskProvider::GroundTruth),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(MaskProvider::File(p.to_string())),
                _ => Err(Error::Usage(format!("mask source must be `gt` or `file:<pattern>`, got {s:?}"))),
            },
        }
    }
}

impl MaskProvider {
    pub fn path_for(&self, scene: &str) -> Option<PathBuf> {
        match self {
            MaskProvider::GroundTruth => None,
            MaskProvider::File(p) => Some(PathBuf::from(p.replace("{scene}", scene))),
        }
    }

    pub fn example(&self, sample: Sample) -> Result<Example> {
        let Some(path) = self.path_for(&sample.scene_id) else {
            return Ok(Example::ground_truth(sample));
        };
        let masks = read_masks(&path)?;
        let (h, w) = (sample.height(), sample.width());
        for (p, m) in &masks {
            if m.shape() != [1, h, w] {
                return Err(format_err(p, "width", format!("mask extent {:?} differs from sample {h}x{w}", m.shape())));
            }
        }
        Ok(Example {
            sample,
            masks: masks.into_iter().map(|(_, m)| m).collect(),
        })
    }
}

fn read_masks(path: &Path) -> Result<Vec<(PathBuf, instadepth_core::Tensor<f32>)>> {
    let meta = fs::metadata(path).map_err(io_err(path))?;
    if meta.is_file() {
        return Ok(vec![(path.to_path_buf(), read_mask(path)?)]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(path)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let m = read_mask(&p)?;
            Ok((p, m))
        })
        .collect()
}
