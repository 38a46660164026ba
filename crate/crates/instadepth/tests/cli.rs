use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use instadepth::dataset::{cm_to_depth, read_sample};
use instadepth::artifacts::read_checkpoint;
use instadepth::pnm::read_pgm;
use instadepth_core::metrics::evaluate;
use instadepth_core::train::{infer, load_model, Example};
use instadepth_core::Tensor;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(dir: &Path, args: &[&str]) -> Out {
    let o = Command::new(env!("CARGO_BIN_EXE_instadepth"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn instadepth");
    Out {
        code: o.status.code().expect("exit code"),
        stdout: String::from_utf8(o.stdout).unwrap(),
        stderr: String::from_utf8(o.stderr).unwrap(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert_eq!(o.code, 0, "{args:?} failed:\n{}", o.stderr);
    o.stdout
}

fn wrote(stdout: &str) -> Vec<PathBuf> {
    stdout.lines().filter_map(|l| l.strip_prefix("wrote ")).map(PathBuf::from).collect()
}

fn kv(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Small dataset plus a few-step run; shared by several tests.
fn small_run(dir: &Path, count: &str) -> PathBuf {
    ok(dir, &["gen-data", "--out", "data", "--count", count, "--size", "32x64", "--objects", "3", "--seed", "7"]);
    ok(
        dir,
        &[
            "train", "--set", "height=32", "--set", "width=64", "--set", "max_steps=3", "--set", "log_every=1",
            "--data", "data", "--out", "run",
        ],
    );
    dir.join("run")
}

#[test]
fn gen_data_split_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(t.path(), &["gen-data", "--out", "a", "--count", "10", "--size", "32x64", "--seed", "3"]);
    ok(t.path(), &["gen-data", "--out", "b", "--count", "10", "--size", "32x64", "--seed", "3"]);
    let split = fs::read_to_string(t.path().join("a/split.txt")).unwrap();
    assert_eq!(split.lines().filter(|l| l.starts_with("train ")).count(), 8);
    assert_eq!(split.lines().filter(|l| l.starts_with("val ")).count(), 2);
    assert_eq!(tree(&t.path().join("a")), tree(&t.path().join("b")));

    // every file on disk is listed on stdout
    let listed: Vec<PathBuf> = wrote(&out).iter().map(|p| p.strip_prefix("a").unwrap().to_path_buf()).collect();
    let mut on_disk: Vec<PathBuf> = tree(&t.path().join("a")).into_keys().collect();
    let mut listed_sorted = listed.clone();
    listed_sorted.sort();
    on_disk.sort();
    assert_eq!(listed_sorted, on_disk);
}

#[test]
fn gen_data_rejects_bad_arguments() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(t.path(), &["gen-data", "--out", "x", "--objects", "0"]).code, 2);
    assert_eq!(run(t.path(), &["gen-data", "--out", "x", "--size", "8x8"]).code, 2);
    assert_eq!(run(t.path(), &["gen-data", "--out", "x", "--size", "64by128"]).code, 2);
    assert_eq!(run(t.path(), &["gen-data", "--out", "x", "--count", "0"]).code, 2);
}

#[test]
fn train_manifest_history_and_resume() {
    let t = tempfile::tempdir().unwrap();
    let run_dir = small_run(t.path(), "5");
    let m = kv(&run_dir.join("manifest.txt"));
    for (k, v) in [
        ("lambda_init", "0.5"),
        ("lambda_obj", "3"),
        ("lambda_seg", "1"),
        ("learning_rate", "0.0001"),
        ("batch_size", "4"),
        ("keep_prob", "0.05"),
        ("unit", "m"),
        ("steps_done", "3"),
        ("eval_split", "val"),
    ] {
        assert_eq!(m[k], v, "{k}");
    }
    let margin: f64 = m["refinement_margin"].parse().unwrap();
    let (init, fin): (f64, f64) = (m["init_mae"].parse().unwrap(), m["final_mae"].parse().unwrap());
    assert!((margin - (init - fin)).abs() < 1e-9);

    let hist = fs::read_to_string(run_dir.join("history.csv")).unwrap();
    assert_eq!(hist.lines().next().unwrap(), "step,loss,val_mae,val_rmse,init_mae,init_rmse");
    assert_eq!(hist.lines().count(), 4);

    ok(
        t.path(),
        &["train", "--resume", "run/checkpoint.bin", "--set", "max_steps=5", "--data", "data", "--out", "run"],
    );
    let steps: Vec<String> = fs::read_to_string(run_dir.join("history.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5"]);
    assert_eq!(kv(&run_dir.join("manifest.txt"))["steps_done"], "5");

    // resumed config may not change the model or the data pipeline
    let o = run(
        t.path(),
        &["train", "--resume", "run/checkpoint.bin", "--set", "keep_prob=0.5", "--data", "data", "--out", "run"],
    );
    assert_eq!(o.code, 2, "{}", o.stderr);
    assert!(o.stderr.contains("keep_prob"));
}

#[test]
fn train_preset_desk_and_input_errors() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["gen-data", "--out", "data", "--count", "2", "--size", "64x128", "--objects", "2"]);
    let stdout = ok(
        t.path(),
        &["train", "--preset", "desk", "--set", "batch_size=1", "--set", "max_steps=1", "--data", "data", "--out", "run"],
    );
    assert_eq!(wrote(&stdout).len(), 3);
    let m = kv(&t.path().join("run/manifest.txt"));
    assert_eq!((m["height"].as_str(), m["width"].as_str()), ("64", "128"));
    assert_eq!(instadepth_core::config::Config::desk().max_steps, 500);

    // a config file with an unknown key is a usage error
    fs::write(t.path().join("bad.cfg"), "heigth=64\n").unwrap();
    let o = run(t.path(), &["train", "--config", "bad.cfg", "--data", "data", "--out", "r2"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("heigth"));

    // data at the wrong resolution
    let o = run(t.path(), &["train", "--set", "max_steps=1", "--data", "data", "--out", "r3"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("64x128"), "{}", o.stderr);

    // missing split file
    fs::remove_file(t.path().join("data/split.txt")).unwrap();
    let o = run(t.path(), &["train", "--preset", "desk", "--data", "data", "--out", "r4"]);
    assert_eq!(o.code, 3);
    assert!(o.stderr.contains("split.txt"));
}

fn parse_report(text: &str) -> Vec<(String, usize, f64, f64)> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("scene,") && !l.starts_with("wrote "))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn eval_reports_per_sample_and_weighted_aggregate() {
    let t = tempfile::tempdir().unwrap();
    small_run(t.path(), "10");
    let stdout = ok(t.path(), &["eval", "--checkpoint", "run/checkpoint.bin", "--data", "data", "--split", "all"]);
    assert_eq!(wrote(&stdout), [PathBuf::from("run/eval.csv")]);
    let rows = parse_report(&stdout);
    assert_eq!(rows.len(), 11);
    let (per, agg) = rows.split_at(10);
    let n: usize = per.iter().map(|r| r.1).sum();
    let weighted: f64 = per.iter().map(|r| r.2 * r.1 as f64).sum::<f64>() / n as f64;
    assert_eq!(agg[0].1, n);
    assert!((agg[0].2 - weighted).abs() < 1e-9 * weighted.max(1.0));
    for r in &rows {
        assert!(r.1 > 0 && r.3 >= r.2);
    }

    let stdout = ok(t.path(), &["eval", "--checkpoint", "run/checkpoint.bin", "--data", "data", "--oracle"]);
    for r in parse_report(&stdout) {
        assert_eq!((r.2, r.3), (0.0, 0.0));
    }

    // a checkpoint for another resolution
    ok(t.path(), &["gen-data", "--out", "big", "--count", "2", "--size", "64x128"]);
    let o = run(t.path(), &["eval", "--checkpoint", "run/checkpoint.bin", "--data", "big"]);
    assert_eq!(o.code, 2);
}

fn depth_tensor(path: &Path) -> Tensor<f32> {
    let img = read_pgm(path).unwrap();
    Tensor::new(&[1, img.height, img.width], img.data.iter().map(|&v| cm_to_depth(v)).collect()).unwrap()
}

#[test]
fn infer_writes_panels_and_raw_depth() {
    let t = tempfile::tempdir().unwrap();
    small_run(t.path(), "5");
    let args = ["infer", "--checkpoint", "run/checkpoint.bin", "--sample", "data/scene_00004", "--out", "inf", "--seed", "1"];
    let stdout = ok(t.path(), &args);
    let files = wrote(&stdout);
    assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "ppm").count(), 6);
    assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "pgm").count(), 2);
    assert_eq!(fs::read_dir(t.path().join("inf")).unwrap().count(), 8);

    let first = tree(&t.path().join("inf"));
    ok(t.path(), &args);
    assert_eq!(first, tree(&t.path().join("inf")));

    // raw d_final re-scored against the stored ground truth
    let line = stdout.lines().find(|l| l.starts_with("scene=")).unwrap();
    let field = |k: &str| -> f64 {
        line.split(' ').find_map(|f| f.strip_prefix(&format!("{k}="))).unwrap().parse().unwrap()
    };
    let sample = read_sample(&t.path().join("data/scene_00004")).unwrap();
    let raw = depth_tensor(&t.path().join("inf/d_final.pgm"));
    let rescored = evaluate(&raw, &sample.depth_gt).unwrap();
    assert_eq!(rescored.n_valid as f64, field("n_valid"));
    // in-process replay: the raw file holds the prediction clipped to the
    // [0, 655.35] m range of the format, to the centimeter
    let ck = read_checkpoint(&t.path().join("run/checkpoint.bin")).unwrap();
    let (_, mut model) = load_model(&ck).unwrap();
    let inf = infer(&mut model, &Example::ground_truth(sample.clone()), 0.05, 1).unwrap();
    assert_eq!(inf.metrics.mae, field("mae"));
    for (&r, &p) in raw.data().iter().zip(inf.prediction.d_final.data()) {
        assert!((r - p.clamp(0.0, 655.35)).abs() <= 0.005 + 1e-4, "{r} vs {p}");
    }
    let clipped = inf.prediction.d_final.data().iter().any(|&d| !(0.0..655.35).contains(&d));
    if clipped {
        // clipping only moves pixels towards the ground truth
        assert!(rescored.mae <= field("mae") + 0.005, "{rescored:?} {line}");
    } else {
        assert!((rescored.mae - field("mae")).abs() <= 0.01, "{rescored:?} {line}");
        assert!((rescored.rmse - field("rmse")).abs() <= 0.01);
    }
}

#[test]
fn gradcheck_lists_each_check_once() {
    let t = tempfile::tempdir().unwrap();
    let stdout = ok(t.path(), &["gradcheck", "--scope", "op"]);
    let names: Vec<&str> = stdout
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .map(|l| l.split_whitespace().nth(1).unwrap())
        .collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    for op in ["matmul", "softmax_rows", "conv2d", "conv_transpose2d", "batchnorm2d", "sigmoid", "relu"] {
        assert!(names.contains(&op), "{op}");
    }
    assert!(!names.contains(&"pipeline"));

    let stdout = ok(t.path(), &["gradcheck", "--scope", "pipeline"]);
    assert!(stdout.lines().any(|l| l.starts_with("PASS") && l.contains("pipeline")));
}
