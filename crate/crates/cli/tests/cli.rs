//! Drives the `cxr` binary end to end.

use std::io::{BufRead, BufReader, Cursor};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn cxr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxr")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json_line(stdout: &str) -> Value {
    serde_json::from_str(stdout.lines().last().expect("output")).expect("json output")
}

fn png(side: u32, value: u8) -> Vec<u8> {
    let img = image::GrayImage::from_pixel(side, side, image::Luma([value]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

/// Small synthetic archive plus a quickly trained model.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("d.cxra");
    let model = dir.join("m.cxrm");
    ok(&cxr(&["synth", "--out", p(&data), "--per-class", "10", "--seed", "4", "-q"]));
    ok(&cxr(&[
        "train", "--data", p(&data), "--out", p(&model), "--width-mult", "0.25", "--epochs", "2", "-q",
    ]));
    (data, model)
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let hash = |name: &str, seed: &str| {
        let out = ok(&cxr(&[
            "synth", "--out", p(&dir.path().join(name)), "--per-class", "5", "--seed", seed, "--log", "json",
        ]));
        json_line(&out)["file_sha256"].as_str().unwrap().to_string()
    };
    let a = hash("a.cxra", "1");
    assert_eq!(a, hash("b.cxra", "1"));
    assert_ne!(a, hash("c.cxra", "2"));
    assert_eq!(std::fs::read(dir.path().join("a.cxra")).unwrap(), std::fs::read(dir.path().join("b.cxra")).unwrap());
}

#[test]
fn ingest_writes_archive_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("tree");
    for (class, n) in [("Normal", 3), ("pneumonia", 2), ("TUBERCULOSIS", 1)] {
        std::fs::create_dir_all(root.join(class)).unwrap();
        for i in 0..n {
            std::fs::write(root.join(class).join(format!("{i}.png")), png(64 + 8 * i, 40 * i as u8)).unwrap();
        }
    }
    std::fs::write(root.join("Normal/corrupt.png"), b"nope").unwrap();
    let (out, report) = (dir.path().join("t.cxra"), dir.path().join("r.json"));
    let stdout = ok(&cxr(&["ingest", "--root", p(&root), "--out", p(&out), "--report", p(&report), "--log", "json"]));
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(written["class_counts"], serde_json::json!([3, 2, 1]));
    assert_eq!(written["failures"].as_array().unwrap().len(), 1);
    assert_eq!(json_line(&stdout)["report"], written);

    std::fs::create_dir_all(root.join("Covid")).unwrap();
    let bad = cxr(&["ingest", "--root", p(&root), "--out", p(&out)]);
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Covid"));
}

#[test]
fn train_eval_predict_flow() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = trained(dir.path());

    let eval = cxr(&["eval", "--data", p(&data), "--model", p(&model), "--split", "all"]);
    let text = ok(&eval);
    assert!(text.contains("samples 30"), "{text}");
    assert!(
        text.contains("reference majority baseline (class counts 1989/4273/394): Pneumonia 4273/6656 = 0.642"),
        "{text}"
    );
    let header = String::from_utf8(eval.stderr).unwrap();
    assert!(header.starts_with("# ") && header.contains("model_sha256=") && header.contains("data_sha256="));

    let val = json_line(&ok(&cxr(&["eval", "--data", p(&data), "--model", p(&model), "--log", "json", "-q"])));
    assert_eq!(val["evaluation"]["samples"], 6);
    assert!((val["reference_majority_baseline"]["accuracy"].as_f64().unwrap() - 4273.0 / 6656.0).abs() < 1e-12);

    let image = dir.path().join("x.png");
    std::fs::write(&image, png(120, 90)).unwrap();
    let out = cxr(&["predict", "--model", p(&model), "--image", p(&image), "--quiet"]);
    assert!(out.stderr.is_empty());
    let report = json_line(&ok(&out));
    let keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["probabilities", "label", "label_id", "model_name", "model_hash", "preprocessing"] {
        assert!(keys.contains(&k), "{k} missing from {keys:?}");
    }
    let sum: f64 = report["probabilities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-6);
}

#[test]
fn json_mode_keeps_stdout_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.cxra");
    ok(&cxr(&["synth", "--out", p(&data), "--per-class", "5", "--log", "json"]));
    let out = cxr(&[
        "train", "--data", p(&data), "--out", p(&dir.path().join("m")), "--width-mult", "0.125", "--epochs", "1",
        "--log", "json",
    ]);
    for line in ok(&out).lines() {
        serde_json::from_str::<Value>(line).expect("json line");
    }
    for line in String::from_utf8(out.stderr).unwrap().lines() {
        serde_json::from_str::<Value>(line).expect("json log line");
    }
}

#[test]
fn exit_codes_follow_failure_category() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = trained(dir.path());
    let missing = dir.path().join("missing");
    let image = dir.path().join("x.png");
    std::fs::write(&image, png(32, 1)).unwrap();
    let unwritable = missing.join("m");
    let garbage = dir.path().join("garbage");
    std::fs::write(&garbage, b"garbage").unwrap();
    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec!["train", "--data", p(&data)], 2),
        (vec!["train", "--data", p(&data), "--out", "x", "--bogus"], 2),
        (vec!["train", "--data", p(&data), "--out", "x", "--epochs", "0"], 2),
        (vec!["train", "--data", p(&data), "--out", "x", "--val", "1.5"], 2),
        (vec!["train", "--data", p(&data), "--out", "x", "--width-mult", "-1"], 2),
        (vec!["verify", "--level", "medium"], 2),
        (vec!["train", "--data", p(&missing), "--out", "x"], 3),
        (vec!["train", "--data", p(&garbage), "--out", "x"], 3),
        (vec!["train", "--data", p(&data), "--out", "x", "--channels", "3"], 3),
        (vec!["predict", "--model", p(&model), "--image", p(&garbage)], 3),
        (vec!["predict", "--model", p(&model), "--image", p(&missing)], 3),
        (vec!["predict", "--model", p(&data), "--image", p(&image)], 4),
        (vec!["predict", "--model", p(&missing), "--image", p(&image)], 4),
        (vec!["predict", "--model", p(&model), "--image", p(&image), "--channels", "3"], 4),
        (vec!["eval", "--data", p(&data), "--model", p(&garbage)], 4),
        (vec!["train", "--data", p(&data), "--out", p(&unwritable), "--width-mult", "0.125", "--epochs", "1"], 5),
    ];
    for (args, want) in cases {
        assert_eq!(code(&cxr(&args)), want, "{args:?}");
    }
    assert_eq!(code(&cxr(&["--help"])), 0);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_reports_its_address() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = trained(dir.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_cxr"))
        .args(["serve", "--model", p(&model), "--bind", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let stderr = child.stderr.take().unwrap();
    let _guard = Server(child);
    let mut lines = BufReader::new(stderr).lines().map(Result::unwrap);
    let addr = lines
        .find_map(|l| l.strip_prefix("listening on ").map(str::to_string))
        .expect("address line");
    // Keep draining so access-log writes never hit a closed pipe.
    std::thread::spawn(move || lines.for_each(drop));
    let text = ureq::get(&format!("{addr}/api/v1/health"))
        .call()
        .unwrap()
        .body_mut()
        .read_to_string()
        .unwrap();
    let body: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(body["status"], "ok");
}

#[test]
fn fast_verification_is_green() {
    let start = Instant::now();
    let out = ok(&cxr(&["verify", "--level", "fast", "-q"]));
    assert!(start.elapsed() < Duration::from_secs(60), "{:?}", start.elapsed());
    assert!(!out.contains("FAIL"), "{out}");
}
