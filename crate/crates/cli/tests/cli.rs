use std::path::Path;
use std::process::{Command, Output};

use bdinvert::image_io;
use bdinvert::tensor::Tensor;
use serde_json::Value;

fn bdinvert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdinvert"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("BDINVERT_CKPT_DIR")
        .output()
        .expect("spawn bdinvert")
}

fn ok(args: &[&str]) -> String {
    let out = bdinvert(args);
    assert!(
        out.status.success(),
        "bdinvert {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    bdinvert(args).status.code().expect("exit code")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

/// Smooth colored blobs; enough structure for the suite and inversion to chew on.
fn write_input(path: &Path, phase: f32) {
    let n = 64;
    let img = Tensor::<f32>::from_fn(&[3, n, n], |i| {
        let (c, y, x) = (i / (n * n), (i / n) % n, i % n);
        let (u, v) = (x as f32 / n as f32, y as f32 / n as f32);
        (6.0 * u + phase + c as f32).sin() * (5.0 * v - phase).cos() * 0.8
    });
    image_io::save_png(&img, path).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ckpt = root.join("ckpt");
    let cfg = root.join("config.json");
    std::fs::write(
        &cfg,
        r#"{"generator": {"z_dim": 32, "w_dim": 32},
            "inversion": {"iterations": 25, "perceptual_resolution": 64},
            "train": {"perceptual_resolution": 64}}"#,
    )
    .unwrap();
    let base = ["--checkpoint-dir", s(&ckpt), "--config", s(&cfg), "--seed", "3"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|a| a.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    run(&["init-generator", "--channels", "16,16,8,8,8"]);
    let gm = read_json(&ckpt.join("generator/run_manifest.json"));
    assert_eq!(gm["command"], "init-generator");
    assert_eq!(gm["seeds"]["generator"], 3);
    assert_eq!(gm["config"]["w_dim"], 32);

    run(&["estimate-pnorm"]);
    run(&["train-encoder", "--iterations", "6", "--batch-size", "2"]);
    let em = read_json(&ckpt.join("encoder/run_manifest.json"));
    assert!(em["checkpoints"]["encoder"].is_string());
    assert_eq!(read_json(&ckpt.join("encoder/loss_trace.json")).as_array().unwrap().len(), 6);

    run(&["discover-directions", "--k", "2"]);
    run(&["discover-directions", "--k", "1", "--layers", "8-9"]);
    let dirs = read_json(&ckpt.join("directions.json"));
    let names: Vec<&str> = dirs.as_array().unwrap().iter().map(|d| d["name"].as_str().unwrap()).collect();
    assert_eq!(names.len(), 3, "{names:?}");
    assert!(names.contains(&"sefa_8_9_0"));

    let inputs = root.join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    write_input(&inputs.join("a.png"), 0.0);
    write_input(&inputs.join("b.png"), 1.3);
    let suite = root.join("suite");
    run(&["make-transform-suite", "--input", s(&inputs), "--grid", "full", "--out", s(&suite)]);
    let pngs = std::fs::read_dir(&suite)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 22);
    assert!(suite.join("a__identity.png").is_file());
    assert_eq!(read_json(&suite.join("a__translate_9.json"))["label"], "translate_9");

    // a small subset keeps the test quick
    let sub = root.join("sub");
    std::fs::create_dir_all(&sub).unwrap();
    for name in ["a__identity", "a__translate_9", "b__rotate_10"] {
        for ext in ["png", "json"] {
            std::fs::copy(suite.join(format!("{name}.{ext}")), sub.join(format!("{name}.{ext}"))).unwrap();
        }
    }
    let results = root.join("results");
    run(&["invert", s(&sub), "--jobs", "2", "--out", s(&results)]);
    let one = results.join("a__identity");
    assert!(one.join("reconstruction.png").is_file());
    let rm = read_json(&one.join("run_manifest.json"));
    assert_eq!(rm["command"], "invert");
    assert_eq!(rm["config"]["iterations"], 25);
    assert_eq!(rm["seeds"]["inversion"], 3);
    for k in ["generator", "pnorm", "encoder"] {
        assert!(rm["checkpoints"][k].is_string(), "missing checksum {k}");
    }
    assert!(rm["metrics"]["final"]["psnr"].is_number());

    // same seed, same bytes
    let again = root.join("again");
    run(&["invert", s(&sub.join("a__identity.png")), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(one.join("reconstruction.png")).unwrap(),
        std::fs::read(again.join("a__identity/reconstruction.png")).unwrap()
    );

    let report = root.join("report");
    let csv = run(&["eval", s(&results), s(&sub), "--out", s(&report)]);
    assert!(csv.starts_with("transform,psnr,ssim,feat_dist"));
    let table = read_json(&report.join("metrics.json"));
    let labels: Vec<&str> = table["rows"].as_array().unwrap().iter().map(|r| r["transform"].as_str().unwrap()).collect();
    for l in ["identity", "translate_9", "rotate_10"] {
        assert!(labels.contains(&l), "{labels:?}");
    }
    assert_eq!(std::fs::read_to_string(report.join("metrics.csv")).unwrap(), csv);

    let edits = root.join("edits");
    run(&["edit", s(&one), "--direction", "sefa_8_9_0", "--alpha", "0", "--out", s(&edits)]);
    assert_eq!(
        std::fs::read(edits.join("edit.png")).unwrap(),
        std::fs::read(one.join("reconstruction.png")).unwrap()
    );
    run(&["edit", s(&one), "--direction", "sefa_8_9_0", "--alpha", "3", "--pair", "--out", s(&edits)]);
    let plus = image_io::load_image(&edits.join("edit_plus.png")).unwrap();
    let minus = image_io::load_image(&edits.join("edit_minus.png")).unwrap();
    assert!(plus.sub(&minus).norm() > 0.0);
    let mixed = root.join("mixed");
    run(&["edit", s(&one), "--style-mix", s(&results.join("b__rotate_10")), "--out", s(&mixed)]);
    assert!(mixed.join("edit.png").is_file());

    // errors that are the caller's fault exit with 2
    let args = with(&["edit", s(&one), "--direction", "nope", "--alpha", "1", "--out", s(&edits)]);
    assert_eq!(code(&args.iter().map(String::as_str).collect::<Vec<_>>()), 2);
    let args = with(&["edit", s(&one), "--style-mix", s(&one), "--layers", "2-99", "--out", s(&edits)]);
    assert_eq!(code(&args.iter().map(String::as_str).collect::<Vec<_>>()), 2);

    // an absurd step size blows the optimization up: numeric failure, exit 3
    let hot = root.join("hot.json");
    std::fs::write(&hot, r#"{"inversion": {"iterations": 4, "lr": 1e30, "perceptual_resolution": 64}}"#).unwrap();
    let out = bdinvert(&[
        "--checkpoint-dir", s(&ckpt), "--config", s(&hot),
        "invert", s(&sub.join("a__identity.png")), "--out", s(&root.join("hot")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn configuration_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let img = root.join("x.png");
    write_input(&img, 0.5);

    // no checkpoints
    let ckpt = root.join("empty");
    assert_eq!(code(&["--checkpoint-dir", s(&ckpt), "invert", s(&img), "--out", s(&root.join("o"))]), 2);
    assert_eq!(code(&["--checkpoint-dir", s(&ckpt), "estimate-pnorm"]), 2);

    // unknown verb and unknown flag are clap usage errors
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["invert", s(&img), "--bogus"]), 2);

    // unknown config key, malformed config, missing --out
    let bad = root.join("bad.json");
    std::fs::write(&bad, r#"{"inversion": {"iteratons": 5}}"#).unwrap();
    assert_eq!(code(&["--config", s(&bad), "init-generator", "--checkpoint-dir", s(&ckpt)]), 0);
    assert_eq!(code(&["--config", s(&bad), "--checkpoint-dir", s(&ckpt), "invert", s(&img), "--out", s(&root.join("o"))]), 2);
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&["--config", s(&bad), "estimate-pnorm"]), 2);
    assert_eq!(code(&["make-transform-suite", "--input", s(root)]), 2);

    // an invalid generator config is rejected before anything is written
    let other = root.join("other");
    assert_eq!(code(&["--checkpoint-dir", s(&other), "init-generator", "--channels", "16,16"]), 2);
    assert!(!other.join("generator").exists());

    // a negative weight fails validation
    assert_eq!(
        code(&["--checkpoint-dir", s(&ckpt), "invert", s(&img), "--omega-f", "-1", "--out", s(&root.join("o"))]),
        2
    );
}
