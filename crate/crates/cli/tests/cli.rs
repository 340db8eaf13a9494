use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use cfsnet::checkpoint::load_checkpoint;
use cfsnet::degrade::procedural_dataset;
use cfsnet::eval::{Comparison, SweepReport};
use cfsnet::image::{self, Image};
use serde_json::{json, Value};
use tempfile::TempDir;

fn cfsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfsnet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = cfsnet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    stdout.lines().last().map(|l| serde_json::from_str(l).unwrap()).unwrap_or(Value::Null)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny denoiser taken through both training steps, plus a dataset of
/// clean images on disk.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        std::fs::create_dir(&data).unwrap();
        for (i, img) in procedural_dataset(3, 3, 1, 16, 16).iter().enumerate() {
            image::save(img, data.join(format!("img{i}.png"))).unwrap();
        }
        let f = Fixture { dir };
        f.train(1, None, "adaptive", "s1.cfsn");
        f.train(2, Some("s1.cfsn"), "adaptive", "cfs.cfsn");
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, step: u8, init: Option<&str>, variant: &str, out: &str) -> Output {
        let config = json!({
            "model": { "modules": 2, "channels": 4, "control_dim": 6, "mapper_hidden_dims": [5, 5, 5] },
            "data": { "source": "path", "path": self.path("data") },
            "patch": 8,
            "stride": 8,
            "losses": {
                "endpoint_a": { "kind": "awgn", "sigma": 20.0 },
                "endpoint_b": { "kind": "awgn", "sigma": 40.0 },
            },
            "iterations": 4,
            "batch_size": 2,
            "lr": 1e-3,
            "seed": step as u64,
            "variant": variant,
        });
        let cfg = self.path(&format!("train{step}_{variant}.json"));
        std::fs::write(&cfg, config.to_string()).unwrap();
        let log = self.path(&format!("{out}.log"));
        let step = step.to_string();
        let mut args = vec!["train", "--task", "denoise", "--step", &step, "--config", s(&cfg), "--out"];
        let out = self.path(out);
        args.push(s(&out));
        args.extend(["--log", s(&log), "--progress", "0"]);
        let init = init.map(|i| self.path(i));
        if let Some(i) = &init {
            args.extend(["--init", s(i)]);
        }
        let output = cfsnet(&args);
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
        assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);
        output
    }
}

#[test]
fn invalid_arguments_are_usage_errors() {
    for alpha in ["abc", "NaN", "inf"] {
        let out = cfsnet(&["restore", "--ckpt", "x.cfsn", "--alpha", alpha, "--input", "a.png", "--output", "b.png"]);
        assert_eq!(out.status.code(), Some(2), "{alpha}");
    }
    assert_eq!(cfsnet(&["restore", "--alpha", "0.5", "--input", "a.png", "--output", "b.png"]).status.code(), Some(2));
    assert_eq!(
        cfsnet(&["train", "--task", "denoise", "--step", "3", "--config", "c", "--out", "o"]).status.code(),
        Some(2)
    );
    assert_eq!(cfsnet(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfsn");
    let out = cfsnet(&["restore", "--ckpt", s(&missing), "--alpha", "0.5", "--input", "a.png", "--output", "b.png"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let garbage = dir.path().join("garbage.cfsn");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let out =
        cfsnet(&["export-coeffs", "--ckpt", s(&garbage), "--alphas", "0,1", "--out", s(&dir.path().join("c.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_restore_sweep_and_export() {
    let f = Fixture::new();
    let (model, prov) = load_checkpoint(f.path("cfs.cfsn")).unwrap();
    assert_eq!(prov.steps_completed, 2);
    assert_eq!(prov.train_seeds, vec![1, 2]);
    assert_eq!(model.config().modules, 2);

    // Step 2 refuses to start without a step-1 checkpoint; step 1 refuses --init.
    let cfg = f.path("train2_adaptive.json");
    let out =
        cfsnet(&["train", "--task", "denoise", "--step", "2", "--config", s(&cfg), "--out", s(&f.path("x.cfsn"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = cfsnet(&[
        "train",
        "--task",
        "sr",
        "--step",
        "2",
        "--config",
        s(&cfg),
        "--init",
        s(&f.path("s1.cfsn")),
        "--out",
        s(&f.path("x.cfsn")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let input = f.path("data/img0.png");
    let output = f.path("restored.png");
    let line = ok(&[
        "restore",
        "--ckpt",
        s(&f.path("cfs.cfsn")),
        "--alpha",
        "0.5",
        "--input",
        s(&input),
        "--output",
        s(&output),
        "--gt",
        s(&input),
    ]);
    assert_eq!(line["alpha"], json!(0.5));
    assert_eq!(line["model_id"], json!(model.model_id()));
    assert!(line["psnr"].is_number() || line["psnr"] == json!("inf"));
    let restored = image::load(&output).unwrap();
    assert_eq!((restored.height(), restored.width()), (16, 16));

    let spec = r#"{"kind":"awgn","sigma":30,"seed":5}"#;
    let sweep = f.path("sweep.json");
    let csv = f.path("sweep.csv");
    let long = f.path("long.csv");
    let line = ok(&[
        "sweep",
        "--ckpt",
        s(&f.path("cfs.cfsn")),
        "--alphas",
        "0:1:0.1",
        "--dataset",
        s(&f.path("data")),
        "--spec",
        spec,
        "--out",
        s(&sweep),
        "--csv",
        s(&csv),
        "--long-csv",
        s(&long),
    ]);
    assert_eq!(line["points"], json!(11));
    let report: SweepReport = serde_json::from_str(&std::fs::read_to_string(&sweep).unwrap()).unwrap();
    assert_eq!(report.grid.len(), 11);
    assert_eq!(report.per_image_psnr.len(), 3);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 12);
    assert_eq!(std::fs::read_to_string(&long).unwrap().lines().count(), 1 + 33);

    let coeffs = f.path("coeffs.csv");
    ok(&["export-coeffs", "--ckpt", s(&f.path("cfs.cfsn")), "--alphas", "0,0.5,1", "--out", s(&coeffs)]);
    let text = std::fs::read_to_string(&coeffs).unwrap();
    assert_eq!(text.lines().next(), Some("alpha,module,channel,value"));
    assert_eq!(text.lines().count(), 1 + 3 * 2 * 4);
    let zero_rows: Vec<&str> = text.lines().filter(|l| l.starts_with("0,")).collect();
    assert!(zero_rows.iter().all(|l| l.ends_with(",0")), "{zero_rows:?}");
}

#[test]
fn compare_three_methods() {
    let f = Fixture::new();
    f.train(2, Some("s1.cfsn"), "shared", "sa.cfsn");
    let spec_file = f.path("spec.json");
    std::fs::write(&spec_file, r#"{"kind":"awgn","sigma":30}"#).unwrap();
    let out = f.path("cmp.json");
    let csv = f.path("cmp.csv");
    let output = cfsnet(&[
        "compare",
        "--cfs",
        s(&f.path("cfs.cfsn")),
        "--sa",
        s(&f.path("sa.cfsn")),
        "--dni-a",
        s(&f.path("s1.cfsn")),
        "--dni-b",
        s(&f.path("s1.cfsn")),
        "--alphas",
        "0:1:0.5",
        "--dataset",
        s(&f.path("data")),
        "--spec",
        s(&spec_file),
        "--out",
        s(&out),
        "--csv",
        s(&csv),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert_eq!(String::from_utf8(output.stdout).unwrap().lines().count(), 3);
    let cmp: Comparison = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(cmp.reports.len(), 3);
    let methods: Vec<&str> = cmp.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["cfsnet", "cfsnet", "cfsnet", "cfsnet-sa", "cfsnet-sa", "cfsnet-sa", "dni", "dni", "dni"]);
    // Both ends of the comparison share the main branch at alpha 0.
    assert_eq!(cmp.rows[0].mean_psnr, cmp.rows[3].mean_psnr);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 10);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn served_model_answers_the_cli() {
    let f = Fixture::new();
    let ui = f.path("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html></html>").unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_cfsnet"))
        .args(["serve", "--ckpt", s(&f.path("cfs.cfsn")), "--port", "0", "--ui-dir", s(&ui)])
        .env("CFS_LOG", "info")
        .env("NO_COLOR", "1")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let stderr = child.stderr.take().unwrap();
    let _server = Server(child);
    let mut addr = None;
    for line in BufReader::new(stderr).lines() {
        let line = line.unwrap();
        if let Some(rest) = line.split("addr=").nth(1) {
            addr = Some(rest.split_whitespace().next().unwrap().to_string());
            break;
        }
    }
    let url = format!("http://{}", addr.expect("server never reported its address"));

    let input = f.path("data/img1.png");
    let remote = f.path("remote.png");
    let local = f.path("local.png");
    let line = ok(&[
        "restore",
        "--server",
        &url,
        "--alpha",
        "0.5",
        "--input",
        s(&input),
        "--output",
        s(&remote),
        "--gt",
        s(&input),
    ]);
    assert_eq!(line["alpha"], json!(0.5));
    assert!(line["timing_ms"].is_number());
    ok(&["restore", "--ckpt", s(&f.path("cfs.cfsn")), "--alpha", "0.5", "--input", s(&input), "--output", s(&local)]);
    let (a, b): (Image, Image) = (image::load(&remote).unwrap(), image::load(&local).unwrap());
    assert_eq!(a.to_u8_interleaved(), b.to_u8_interleaved());

    let sweep = f.path("remote_sweep.json");
    let line = ok(&[
        "sweep",
        "--server",
        &url,
        "--alphas",
        "0,0.5,1",
        "--dataset",
        s(&f.path("data")),
        "--spec",
        r#"{"kind":"jpeg","quality":20}"#,
        "--out",
        s(&sweep),
    ]);
    assert_eq!(line["points"], json!(3));

    let out = cfsnet(&[
        "restore",
        "--server",
        &url,
        "--alpha",
        "0.5",
        "--input",
        s(&input),
        "--output",
        s(&remote),
        "--method",
        "main-only",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
