//! The `instadepth` command line.
//!
//! Every command prints the paths of the files it wrote to stdout, one per
//! line prefixed with `wrote `. Progress goes to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use instadepth_core::config::Config;
use instadepth_core::gradcheck::{op_suite, CheckReport};
use instadepth_core::metrics::{evaluate, MetricsAccumulator};
use instadepth_core::model::pipeline_gradcheck;
use instadepth_core::synth::{Sample, MAX_OBJECTS};
use instadepth_core::train::{
    evaluate_split, infer, load_model, predict, sparse_for, train_loop, Dataset, Example, Trainer,
};

use crate::artifacts::{
    out_path, read_checkpoint, write_checkpoint, write_history, write_manifest, EvalReport, RunManifest,
    SampleReport, CHECKPOINT_FILE, EVAL_FILE, HISTORY_FILE, MANIFEST_FILE,
};
use crate::dataset::{generate_dataset, load_dataset, read_sample, GenOptions};
use crate::error::{io_err, Error, Result};
use crate::masks::MaskProvider;
use crate::panels::write_panels;

/// Coordinates sampled by the pipeline gradient check.
pub const PIPELINE_COORDS: usize = 120;

#[derive(Debug, Parser)]
#[command(name = "instadepth", version, about = "Instance-mask guided depth completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset with an 80/20 split file.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, manifest and history.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run one sample and write the six panels and raw depth maps.
    Infer(InferArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// HxW, e.g. 64x128.
    #[arg(long, default_value = "64x128", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 4)]
    pub objects: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `default` or `desk`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides a single key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint; only the step budget and logging keys may
    /// be changed with --set.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// `gt` or `file:<pattern>` with `{scene}` in the pattern.
    #[arg(long, default_value = "gt")]
    pub masks: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Val)]
    pub split: SplitChoice,
    /// Report file; defaults to eval.csv next to the checkpoint.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value = "gt")]
    pub masks: String,
    /// Score the ground truth against itself instead of running the model.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One sample directory.
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the checkpoint's keep_prob.
    #[arg(long)]
    pub keep_prob: Option<f64>,
    /// Sparsity seed; defaults to the checkpoint's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "gt")]
    pub masks: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Op,
    Pipeline,
    All,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::All)]
    pub scope: Scope,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("expected HxW, got {s:?}"));
    Ok((n(h)?, n(w)?))
}

fn wrote(out: &mut dyn Write, p: &Path) -> Result<()> {
    writeln!(out, "wrote {}", p.display()).map_err(stdout_err)
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
}

/// Parses `args` (including the program name) and runs the command; returns
/// the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Infer(a) => infer_cmd(&a, out),
        Command::Gradcheck(a) => gradcheck(&a, out),
    }
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    if !(1..=MAX_OBJECTS).contains(&a.objects) {
        return Err(Error::Usage(format!("--objects must be in 1..={MAX_OBJECTS}, got {}", a.objects)));
    }
    let opts = GenOptions {
        count: a.count,
        seed: a.seed,
        height: a.size.0,
        width: a.size.1,
        objects: a.objects,
    };
    for p in generate_dataset(&a.out, &opts).map_err(usage_on_invalid)? {
        wrote(out, &p)?;
    }
    Ok(())
}

/// Generator argument errors are the caller's fault.
fn usage_on_invalid(e: Error) -> Error {
    match e {
        Error::Core(instadepth_core::Error::InvalidArgument { op, msg }) => Error::Usage(format!("{op}: {msg}")),
        e => e,
    }
}

fn parse_set(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {s:?}")))
}

fn apply_sets(mut cfg: Config, sets: &[String]) -> Result<Config> {
    for s in sets {
        let (k, v) = parse_set(s)?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(io_err(p))
}

fn examples(samples: Vec<Sample>, masks: &MaskProvider) -> Result<Vec<Example>> {
    samples.into_iter().map(|s| masks.example(s)).collect()
}

fn check_resolution(cfg: &Config, samples: &[Example]) -> Result<()> {
    for ex in samples {
        let s = &ex.sample;
        if (s.height(), s.width()) != (cfg.height, cfg.width) {
            return Err(Error::Usage(format!(
                "sample {} is {}x{} but the model expects {}x{}",
                s.scene_id,
                s.height(),
                s.width(),
                cfg.height,
                cfg.width
            )));
        }
    }
    Ok(())
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let masks: MaskProvider = a.masks.parse()?;
    let mut trainer = match &a.resume {
        Some(ck_path) => {
            if a.config.is_some() || a.preset.is_some() {
                return Err(Error::Usage("--resume takes its config from the checkpoint; use --set to extend it".into()));
            }
            let ck = read_checkpoint(ck_path)?;
            let cfg = apply_sets(Config::parse(&ck.config)?, &a.set)?;
            Trainer::resume(&ck, cfg)?
        }
        None => {
            let mut cfg = Config::preset(a.preset.as_deref().unwrap_or("default"))?;
            if let Some(p) = &a.config {
                cfg = cfg.apply(&read_text(p)?)?;
            }
            Trainer::new(apply_sets(cfg, &a.set)?)?
        }
    };
    let cfg = trainer.config().clone();

    let (split, loaded) = load_dataset(&a.data)?;
    let data = Dataset {
        train: examples(loaded.train, &masks)?,
        val: examples(loaded.val, &masks)?,
    };
    check_resolution(&cfg, &data.train)?;
    check_resolution(&cfg, &data.val)?;

    let total = cfg.total_steps(data.train.len());
    let unit = cfg.metric_unit.as_str();
    eprintln!("training {} -> {} steps on {} samples", trainer.step(), total, data.train.len());
    let history = train_loop(&mut trainer, &data, |r| {
        eprintln!(
            "step {:>6} loss {:.5} val_mae {:.4}{unit} val_rmse {:.4}{unit} init_mae {:.4}{unit}",
            r.step, r.loss, r.val.mae, r.val.rmse, r.val_init.mae
        );
    })?;

    let (eval_set, eval_split, is_val) = if data.val.is_empty() {
        (&data.train, "train", false)
    } else {
        (&data.val, "val", true)
    };
    let factor = cfg.metric_unit.factor();
    let (fin, init) = evaluate_split(trainer.model_mut(), &cfg, eval_set, is_val)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        data: a.data.display().to_string(),
        split,
        masks: a.masks.clone(),
        step: trainer.step(),
        final_loss: history.losses.last().copied(),
        final_metrics: fin.scaled(factor),
        init_metrics: init.scaled(factor),
        eval_split,
    };

    let ck_path = out_path(&a.out, CHECKPOINT_FILE)?;
    write_checkpoint(&ck_path, &trainer.checkpoint())?;
    let hist_path = a.out.join(HISTORY_FILE);
    write_history(&hist_path, &history, a.resume.is_some())?;
    let man_path = a.out.join(MANIFEST_FILE);
    write_manifest(&man_path, &manifest)?;
    for p in [&ck_path, &hist_path, &man_path] {
        wrote(out, p)?;
    }
    Ok(())
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let masks: MaskProvider = a.masks.parse()?;
    let (cfg, mut model) = load_model(&read_checkpoint(&a.checkpoint)?)?;
    let (split, loaded) = load_dataset(&a.data)?;
    let mut chosen: Vec<(Example, bool, usize)> = Vec::new();
    if matches!(a.split, SplitChoice::Train | SplitChoice::All) {
        for (i, ex) in examples(loaded.train, &masks)?.into_iter().enumerate() {
            chosen.push((ex, false, i));
        }
    }
    if matches!(a.split, SplitChoice::Val | SplitChoice::All) {
        for (i, ex) in examples(loaded.val, &masks)?.into_iter().enumerate() {
            chosen.push((ex, true, i));
        }
    }
    if chosen.is_empty() {
        return Err(Error::Usage(format!("{}: the selected split is empty", a.data.display())));
    }
    let _ = split;
    check_resolution(&cfg, &chosen.iter().map(|c| c.0.clone()).collect::<Vec<_>>())?;

    let factor = cfg.metric_unit.factor();
    let (mut fin, mut init) = (MetricsAccumulator::new(), MetricsAccumulator::new());
    let mut samples = Vec::with_capacity(chosen.len());
    for (ex, is_val, i) in &chosen {
        let sparse = sparse_for(&cfg, ex, *is_val, *i, 0)?;
        let (m, mi) = if a.oracle {
            let gt = &ex.sample.depth_gt;
            let m = fin.add(gt, gt)?;
            (m, init.add(gt, gt)?)
        } else {
            let p = predict(&mut model, ex, &sparse)?;
            (fin.add(&p.d_final, &p.gt)?, init.add(&p.d_init, &p.gt)?)
        };
        samples.push(SampleReport {
            scene: ex.sample.scene_id.clone(),
            metrics: m.scaled(factor),
            init_metrics: mi.scaled(factor),
        });
    }
    let report = EvalReport {
        unit: cfg.metric_unit.as_str(),
        samples,
        aggregate: fin.finish()?.scaled(factor),
        aggregate_init: init.finish()?.scaled(factor),
    };
    let text = report.to_csv();
    out.write_all(text.as_bytes()).map_err(stdout_err)?;
    let path = match &a.report {
        Some(p) => p.clone(),
        None => a.checkpoint.parent().unwrap_or(Path::new(".")).join(EVAL_FILE),
    };
    fs::write(&path, text).map_err(io_err(&path))?;
    wrote(out, &path)
}

fn infer_cmd(a: &InferArgs, out: &mut dyn Write) -> Result<()> {
    let masks: MaskProvider = a.masks.parse()?;
    let (cfg, mut model) = load_model(&read_checkpoint(&a.checkpoint)?)?;
    let ex = masks.example(read_sample(&a.sample)?)?;
    check_resolution(&cfg, std::slice::from_ref(&ex))?;
    let keep = a.keep_prob.unwrap_or(cfg.keep_prob);
    if !(0.0..=1.0).contains(&keep) {
        return Err(Error::Usage(format!("--keep-prob must be in [0, 1], got {keep}")));
    }
    let inf = infer(&mut model, &ex, keep, a.seed.unwrap_or(cfg.seed))?;
    debug_assert_eq!(evaluate(&inf.prediction.d_final, &inf.prediction.gt).ok(), Some(inf.metrics));
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let files = write_panels(&a.out, &ex.sample, &inf)?;
    let f = cfg.metric_unit.factor();
    let (m, mi) = (inf.metrics.scaled(f), inf.init_metrics.scaled(f));
    writeln!(
        out,
        "scene={} unit={} n_valid={} mae={} rmse={} init_mae={} init_rmse={}",
        ex.sample.scene_id,
        cfg.metric_unit.as_str(),
        m.n_valid,
        m.mae,
        m.rmse,
        mi.mae,
        mi.rmse
    )
    .map_err(stdout_err)?;
    for p in &files {
        wrote(out, p)?;
    }
    Ok(())
}

fn report_line(out: &mut dyn Write, r: &CheckReport) -> Result<()> {
    writeln!(
        out,
        "{:<6} {:<24} max_rel_err {:.3e} tol {:.0e} cases {} coords {}",
        if r.passed() { "PASS" } else { "FAIL" },
        r.name,
        r.max_rel_error,
        r.tolerance,
        r.cases,
        r.coords
    )
    .map_err(stdout_err)
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let mut reports = Vec::new();
    if matches!(a.scope, Scope::Op | Scope::All) {
        reports.extend(op_suite()?);
    }
    if matches!(a.scope, Scope::Pipeline | Scope::All) {
        reports.push(pipeline_gradcheck(PIPELINE_COORDS, 0)?);
    }
    for r in &reports {
        report_line(out, r)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        writeln!(out, "all {} checks passed", reports.len()).map_err(stdout_err)?;
        Ok(())
    } else {
        Err(Error::Verification(format!("gradient check failed: {}", failed.join(", "))))
    }
}
