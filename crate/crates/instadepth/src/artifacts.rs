//! Run outputs: checkpoints, the run manifest, the history CSV and the
//! evaluation report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use instadepth_core::config::Config;
use instadepth_core::metrics::Metrics;
use instadepth_core::params::Checkpoint;
use instadepth_core::train::History;

use crate::dataset::Split;
use crate::error::{format_err, io_err, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVAL_FILE: &str = "eval.csv";

pub fn write_checkpoint(path: &Path, ck: &Checkpoint<f32>) -> Result<()> {
    fs::write(path, ck.encode()).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Checkpoint::decode(&bytes).map_err(|e| format_err(path, "checkpoint", e.to_string()))
}

pub const HISTORY_HEADER: &str = "step,loss,val_mae,val_rmse,init_mae,init_rmse";

/// One row per log record; metric columns are in the run's unit.
pub fn history_csv(h: &History) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in &h.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.loss, r.val.mae, r.val.rmse, r.val_init.mae, r.val_init.rmse
        );
    }
    s
}

/// Appends to an existing history (a resumed run) or starts a new one.
pub fn write_history(path: &Path, h: &History, append: bool) -> Result<()> {
    let text = history_csv(h);
    let text = if append && path.exists() {
        let old = fs::read_to_string(path).map_err(io_err(path))?;
        if !old.starts_with(HISTORY_HEADER) {
            return Err(format_err(path, "header", format!("expected {HISTORY_HEADER:?}")));
        }
        let body = text.split_once('\n').map_or("", |(_, b)| b);
        format!("{old}{body}")
    } else {
        text
    };
    fs::write(path, text).map_err(io_err(path))
}

/// Everything needed to identify and judge a training run. No paths to the
/// output or timestamps, so identical runs give identical manifests.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config: Config,
    pub data: String,
    pub split: Split,
    pub masks: String,
    pub step: u64,
    pub final_loss: Option<f64>,
    /// Final-depth and initial-depth metrics on the validation split (or the
    /// training split when there is none), in the run's unit.
    pub final_metrics: Metrics,
    pub init_metrics: Metrics,
    pub eval_split: &'static str,
}

impl RunManifest {
    /// How much the refinement head improves on the initial depth: init MAE
    /// minus final MAE.
    pub fn refinement_margin(&self) -> f64 {
        self.init_metrics.mae - self.final_metrics.mae
    }

    pub fn to_text(&self) -> String {
        let mut s = self.config.to_text();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("data", self.data.clone());
        kv("train_samples", self.split.train.join(","));
        kv("val_samples", self.split.val.join(","));
        kv("mask_source", self.masks.clone());
        kv("unit", self.config.metric_unit.as_str().into());
        kv("steps_done", self.step.to_string());
        kv("final_loss", self.final_loss.map_or("none".into(), |l| l.to_string()));
        kv("eval_split", self.eval_split.into());
        kv("n_valid", self.final_metrics.n_valid.to_string());
        kv("final_mae", self.final_metrics.mae.to_string());
        kv("final_rmse", self.final_metrics.rmse.to_string());
        kv("init_mae", self.init_metrics.mae.to_string());
        kv("init_rmse", self.init_metrics.rmse.to_string());
        kv("refinement_margin", self.refinement_margin().to_string());
        s
    }
}

pub fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    fs::write(path, m.to_text()).map_err(io_err(path))
}

/// Metrics of one sample in an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    pub scene: String,
    pub metrics: Metrics,
    pub init_metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub unit: &'static str,
    pub samples: Vec<SampleReport>,
    pub aggregate: Metrics,
    pub aggregate_init: Metrics,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# unit={}\nscene,n_valid,mae,rmse,init_mae,init_rmse\n", self.unit);
        let mut row = |name: &str, m: &Metrics, i: &Metrics| {
            let _ = writeln!(s, "{name},{},{},{},{},{}", m.n_valid, m.mae, m.rmse, i.mae, i.rmse);
        };
        for r in &self.samples {
            row(&r.scene, &r.metrics, &r.init_metrics);
        }
        row("aggregate", &self.aggregate, &self.aggregate_init);
        s
    }
}

/// Joins `name` onto `dir`, creating `dir` first.
pub fn out_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(dir.join(name))
}
