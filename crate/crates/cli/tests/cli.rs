use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::{json, Value};
use tempfile::TempDir;

fn effecg(args: &[&str]) -> Output {
    effecg_env(args, &[])
}

fn effecg_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_effecg"));
    cmd.args(args).env_remove("EFFECG_THREADS").env_remove("RUST_LOG");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn effecg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(multi: bool, epochs: usize) -> Value {
    let mut model = json!({
        "input_length": 500,
        "stem_channels": 8,
        "fc_hidden": 16,
        "ae_hidden": 4,
        "dropout_rate": 0.0,
        "stages": [
            {"expansion": 1, "out_channels": 8, "kernel": 3, "stride": 2, "repeats": 1, "se_ratio": 4},
            {"expansion": 2, "out_channels": 12, "kernel": 5, "stride": 2, "repeats": 1, "se_ratio": 4}
        ]
    });
    let mut train = json!({
        "epochs": epochs,
        "batch_size": 8,
        "early_stopping": null,
        "schedule": {"d_model": 256, "warmup_steps": 100}
    });
    if multi {
        model["head"] = json!("sigmoid");
        model["fusion"] = json!({"enabled": true, "embed_dim": 4, "tokens": 4, "token_width": 4});
        train["loss"] = json!({"kind": "bce"});
    }
    json!({
        "seed": 3,
        "split": {"train": 0.75, "val": 0.25, "test": 0.0},
        "model": model,
        "train": train
    })
}

struct Run {
    _dir: TempDir,
    root: PathBuf,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Synthetic data plus a trained run under `run/`.
fn trained(multi: bool, epochs: usize) -> Run {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let mut args = vec!["synth", "--out", p(&data), "--count", "32", "--fs", "125", "--duration", "4"];
    args.extend(["--noise", "0.02", "--seed", "7"]);
    if multi {
        args.extend(["--classes", "3", "--multi-label"]);
    } else {
        args.extend(["--classes", "2"]);
    }
    ok(effecg(&args));
    let cfg = root.join("tiny.json");
    fs::write(&cfg, tiny_config(multi, epochs).to_string()).unwrap();
    ok(effecg(&["train", "--config", p(&cfg), "--data", p(&data), "--outdir", p(&root.join("run"))]));
    Run { _dir: dir, root }
}

fn read_fiducials(path: &Path) -> BTreeMap<(String, String), Vec<i64>> {
    let mut out: BTreeMap<(String, String), Vec<i64>> = BTreeMap::new();
    for line in fs::read_to_string(path).unwrap().lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        out.entry((cells[0].to_string(), cells[1].to_string()))
            .or_default()
            .push(cells[2].parse().unwrap());
    }
    out
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(effecg(&["synth", "--count", "10", "--seed", "1", "--out", p(out)]));
    }
    let files = dir_bytes(&a);
    assert_eq!(files.keys().filter(|k| k.ends_with(".ecg")).count(), 10);
    assert!(files.contains_key("fiducials.csv"));
    assert_eq!(files, dir_bytes(&b));
}

#[test]
fn synth_rejects_out_of_range_rate() {
    let dir = TempDir::new().unwrap();
    let o = effecg(&["synth", "--bpm", "300", "--out", p(dir.path())]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("bpm"));
}

#[test]
fn noise_free_fiducials_match_detector() {
    let dir = TempDir::new().unwrap();
    let (data, pre) = (dir.path().join("data"), dir.path().join("pre"));
    ok(effecg(&["synth", "--count", "4", "--seed", "2", "--noise", "0", "--beats", "12", "--out", p(&data)]));
    ok(effecg(&["preprocess", "--data", p(&data), "--outdir", p(&pre)]));
    let truth = read_fiducials(&data.join("fiducials.csv"));
    let found = read_fiducials(&pre.join("fiducials.csv"));
    assert_eq!(truth.keys().collect::<Vec<_>>(), found.keys().collect::<Vec<_>>());
    // 10 ms at the default 500 Hz.
    let p_tolerance = 5;
    for (key, t) in &truth {
        let f = &found[key];
        if key.1 == "r_peak" {
            assert_eq!(t, f, "{key:?}");
        } else {
            assert_eq!(t.len(), f.len(), "{key:?}");
            assert!(t.iter().zip(f).all(|(a, b)| (a - b).abs() <= p_tolerance), "{key:?}: {t:?} vs {f:?}");
        }
    }
    assert_eq!(dir_bytes(&pre).keys().filter(|k| k.ends_with(".ecg")).count(), 4);
}

#[test]
fn train_emits_artifacts_and_repeats_exactly() {
    let start = Instant::now();
    let run = trained(false, 6);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "{secs}s");
    for f in ["model.ckpt", "history.csv", "config.resolved.json", "loss.svg", "micro_f1.svg"] {
        assert!(run.path("run").join(f).is_file(), "missing {f}");
    }
    let history = fs::read_to_string(run.path("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 7);
    assert!(history.starts_with("epoch,step,lrate,train_loss,val_loss,val_micro_f1\n"));

    let resolved: Value = serde_json::from_str(&fs::read_to_string(run.path("run/config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["class_count"], 2);
    assert_eq!(resolved["model"]["leads"], 1);
    assert_eq!(resolved["seed"], 3);

    let again = run.path("again");
    ok(effecg(&[
        "train",
        "--config",
        p(&run.path("tiny.json")),
        "--data",
        p(&run.path("data")),
        "--outdir",
        p(&again),
    ]));
    assert_eq!(history, fs::read_to_string(again.join("history.csv")).unwrap());
    assert_eq!(fs::read(run.path("run/model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());
}

#[test]
fn missing_data_path_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("no-such-dir");
    let o = effecg(&["train", "--data", p(&missing), "--outdir", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no-such-dir"), "{}", stderr(&o));
}

#[test]
fn divergence_has_its_own_exit_code() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(effecg(&["synth", "--out", p(&data), "--count", "8", "--classes", "2", "--fs", "125", "--duration", "4"]));
    let rec = data.join("rec0000.ecg");
    let text = fs::read_to_string(&rec).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[100] = "NaN".into();
    fs::write(&rec, lines.join("\n")).unwrap();
    let mut cfg = tiny_config(false, 2);
    cfg["data"] = json!({"drop_abnormal": false});
    cfg["split"] = json!({"train": 1.0, "val": 0.0, "test": 0.0});
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = dir.path().join("run");
    let o = effecg(&["train", "--config", p(&cfg_path), "--data", p(&data), "--outdir", p(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(out.join("config.resolved.json").is_file());
}

fn eval_report(run: &Run, name: &str, extra: &[&str]) -> Value {
    let report = run.path(name).join("report.json");
    let (ckpt, cfg) = (run.path("run/model.ckpt"), run.path("run/config.resolved.json"));
    let mut args = vec!["eval", "--checkpoint", p(&ckpt), "--config", p(&cfg), "--report", p(&report)];
    args.extend_from_slice(extra);
    ok(effecg(&args));
    serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap()
}

fn last_val_f1(run: &Run) -> f64 {
    let history = fs::read_to_string(run.path("run/history.csv")).unwrap();
    let last = history.lines().last().unwrap();
    last.rsplit(',').next().unwrap().parse().unwrap()
}

#[test]
fn eval_reproduces_training_val_f1() {
    let run = trained(false, 3);
    let report = eval_report(&run, "ev", &["--subset", "val"]);
    let f1 = report["micro_f1"].as_f64().unwrap();
    assert!((f1 - last_val_f1(&run)).abs() < 1e-9, "{f1} vs {}", last_val_f1(&run));
    assert_eq!(report["sample_count"], 8);
    for f in ["roc.csv", "roc.svg", "confusion.svg"] {
        assert!(run.path("ev").join(f).is_file(), "missing {f}");
    }
    let roc = fs::read_to_string(run.path("ev/roc.csv")).unwrap();
    assert!(roc.starts_with("class,threshold,fpr,tpr\n"));
}

/// Keys and JSON types of the evaluation report.
fn check_schema(r: &Value) {
    let k = r["class_count"].as_u64().unwrap() as usize;
    assert!(r["parameter_count"].as_u64().unwrap() > 0);
    assert!(r["sample_count"].is_u64());
    assert!(matches!(r["head"].as_str(), Some("softmax" | "sigmoid")));
    assert_eq!(r["thresholds"].as_array().unwrap().len(), k);
    for key in ["micro_f1", "macro_f1", "accuracy", "cinc_score"] {
        let v = r[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(r["mean_auc"].is_null() || r["mean_auc"].is_f64());
    assert!(r["cinc_classes"].is_array());
    let per_class = r["per_class"].as_array().unwrap();
    assert_eq!(per_class.len(), k);
    for (c, m) in per_class.iter().enumerate() {
        assert_eq!(m["class"].as_u64().unwrap() as usize, c);
        for key in ["precision", "recall", "f1"] {
            assert!(m[key].is_f64() || m[key].is_u64(), "{key}");
        }
        assert!(m["support"].is_u64());
        assert!(m["auc"].is_null() || m["auc"].is_number());
    }
    match r["head"].as_str().unwrap() {
        "softmax" => {
            assert_eq!(r["confusion"]["counts"].as_array().unwrap().len(), k);
            assert!(r["one_vs_rest"].is_null());
        }
        _ => {
            assert_eq!(r["one_vs_rest"].as_array().unwrap().len(), k);
            assert!(r["confusion"].is_null());
        }
    }
}

fn predicted_positives(r: &Value) -> Vec<u64> {
    r["one_vs_rest"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m[0][1].as_u64().unwrap() + m[1][1].as_u64().unwrap())
        .collect()
}

#[test]
fn eval_report_schema_and_threshold_monotonicity() {
    let run = trained(true, 3);
    let at_half = eval_report(&run, "half", &["--thresholds", "0.5"]);
    let at_low = eval_report(&run, "low", &["--thresholds", "0.3"]);
    check_schema(&at_half);
    check_schema(&at_low);
    assert_eq!(at_low["thresholds"], json!([0.3, 0.3, 0.3]));
    let (hi, lo) = (predicted_positives(&at_half), predicted_positives(&at_low));
    assert!(hi.iter().zip(&lo).all(|(h, l)| l >= h), "{hi:?} vs {lo:?}");
    assert!(!run.path("half").join("confusion.svg").exists());

    let single = trained(false, 1);
    check_schema(&eval_report(&single, "ev", &[]));
}

#[test]
fn eval_rejects_mismatched_data() {
    let run = trained(false, 1);
    let other = run.path("two-lead");
    ok(effecg(&["synth", "--out", p(&other), "--count", "4", "--classes", "2", "--leads", "2", "--fs", "125"]));
    let o = effecg(&[
        "eval",
        "--checkpoint",
        p(&run.path("run/model.ckpt")),
        "--data",
        p(&other),
        "--report",
        p(&run.path("bad/report.json")),
    ]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("1 leads") && msg.contains("2 leads"), "{msg}");
}

#[test]
fn infer_writes_predictions() {
    let run = trained(false, 1);
    let out = run.path("pred");
    ok(effecg(&["infer", "--checkpoint", p(&run.path("run/model.ckpt")), "--data", p(&run.path("data")), "--outdir", p(&out)]));
    let text = fs::read_to_string(out.join("predictions.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "record,score_0,score_1,predicted");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 32);
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        let s: f64 = cells[1].parse::<f64>().unwrap() + cells[2].parse::<f64>().unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn analyze_counts_every_record() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(effecg(&["synth", "--out", p(&data), "--count", "20", "--classes", "3", "--multi-label", "--fs", "125", "--duration", "3"]));
    let o = ok(effecg(&["analyze", "--data", p(&data), "--labels", "1", "--outdir", p(dir.path())]));
    let csv = stdout(&o);
    assert_eq!(csv, fs::read_to_string(dir.path().join("distribution.csv")).unwrap());
    let total = csv.lines().last().unwrap();
    // Label 1 marks male records, so the female column is empty.
    let cells: Vec<&str> = total.split(',').collect();
    assert_eq!(cells[0], "total");
    assert_eq!(cells[1], "0");
    assert_eq!(cells[2], cells[3]);
}

#[test]
fn gradcheck_passes_and_is_stable() {
    let a = ok(effecg(&["gradcheck", "--trials", "3"]));
    let table = stdout(&a);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 13);
    assert!(rows.iter().all(|r| r.ends_with("pass")), "{table}");
    let b = ok(effecg(&["gradcheck", "--trials", "3"]));
    assert_eq!(table, stdout(&b));
}

#[test]
fn gradcheck_injected_fault_fails_its_row() {
    let o = effecg(&["gradcheck", "--trials", "3", "--only", "dense,conv1d", "--inject-fault", "conv1d"]);
    assert_eq!(code(&o), 4);
    let table = stdout(&o);
    let row = |name: &str| table.lines().find(|l| l.starts_with(name)).unwrap().to_string();
    assert!(row("conv1d").ends_with("FAIL"), "{table}");
    assert!(row("dense").ends_with("pass"), "{table}");
    assert!(stderr(&o).contains("conv1d"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&effecg(&["no-such-command"])), 1);
    assert_eq!(code(&effecg(&["gradcheck", "--only", "no_such_block"])), 1);
    let o = effecg_env(&["gradcheck", "--trials", "1", "--only", "dense"], &[("EFFECG_THREADS", "zero")]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("EFFECG_THREADS"));
    ok(effecg_env(&["gradcheck", "--trials", "1", "--only", "dense"], &[("EFFECG_THREADS", "2")]));
    assert_eq!(code(&effecg(&["--help"])), 0);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    let o = effecg(&["train", "--config", p(&cfg), "--outdir", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no_such_field"));
}
