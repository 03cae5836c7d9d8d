//! End-to-end tests driving the compiled binary through the full pipeline
//! on a miniature config.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_editkit"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn editkit");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "seed": 7,
        "world": {
            "k": 4, "d": 8, "n_attr": 3,
            "img_dim": 32, "id_dim": 16, "joint_dim": 8
        },
        "data": { "n_examples": 64 },
        "model": {
            "k": 4, "d": 8, "hidden": 32, "n_blocks": 1, "n_heads": 2,
            "d_txt": 16, "id_dim": 16, "mlp_ratio": 2, "t_max": 100
        },
        "train": { "steps": 30, "batch": 4, "log_every": 10 },
        "sample": { "steps": 5, "t_start": 60 },
        "eval": {
            "n_latents": 2, "t_start": 60, "n_steps": 5,
            "composite_sizes": [2]
        }
    });
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn missing_world_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "gen-data",
            "--world",
            tmp.path().join("nowhere").to_str().unwrap(),
            "--out",
            tmp.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("world not found"), "stderr: {stderr}");
}

#[test]
fn empty_instruction_list_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "edit",
            "--world",
            tmp.path().join("w").to_str().unwrap(),
            "--checkpoint",
            tmp.path().join("c").to_str().unwrap(),
            "--out",
            tmp.path().join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn gen_world_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        run_ok(&["gen-world", "--config", &cfg, "--out", out.to_str().unwrap()]);
    }
    let ma = fs::read(a.join("world/manifest.json")).unwrap();
    let mb = fs::read(b.join("world/manifest.json")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let root = tmp.path();
    let world = root.join("run/world");
    let data = root.join("data/dataset");
    let ckpt = root.join("trained/checkpoint");

    run_ok(&["gen-world", "--config", &cfg, "--out", root.join("run").to_str().unwrap()]);
    run_ok(&[
        "gen-data", "--config", &cfg,
        "--world", world.to_str().unwrap(),
        "--out", root.join("data").to_str().unwrap(),
    ]);
    run_ok(&[
        "train", "--config", &cfg,
        "--world", world.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", root.join("trained").to_str().unwrap(),
    ]);
    assert!(root.join("trained/loss-history.json").exists());
    assert!(root.join("trained/run-log.json").exists());

    // Two identical edit invocations produce byte-identical artifacts.
    for out in ["e1", "e2"] {
        run_ok(&[
            "edit", "--config", &cfg,
            "--world", world.to_str().unwrap(),
            "--checkpoint", ckpt.to_str().unwrap(),
            "--instruction", "add bangs",
            "--steps", "5", "--t-start", "60",
            "--out", root.join(out).to_str().unwrap(),
        ]);
    }
    for name in ["edited.bin", "views.bin", "edit-report.json"] {
        let x = fs::read(root.join("e1").join(name)).unwrap();
        let y = fs::read(root.join("e2").join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }

    run_ok(&[
        "eval", "--config", &cfg,
        "--world", world.to_str().unwrap(),
        "--checkpoint", ckpt.to_str().unwrap(),
        "--out", root.join("evalout").to_str().unwrap(),
    ]);
    assert!(root.join("evalout/report.json").exists());

    run_ok(&[
        "ablate", "--config", &cfg,
        "--world", world.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", root.join("abl").to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(root.join("abl/comparison.csv")).unwrap();
    let rows: Vec<_> = csv.lines().collect();
    assert!(rows[0].starts_with("variant,aa,ad,id,dir"));
    assert_eq!(rows.len(), 3, "expected header + 2 variant rows:\n{csv}");
    assert!(root.join("abl/improvement.csv").exists());
}
