use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use reslab::data::{encode_idx_images, encode_idx_labels};

fn reslab(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reslab"));
    cmd.args(args).env_remove("RESLAB_OUT");
    if let Some(p) = env_out {
        cmd.env("RESLAB_OUT", p);
    }
    cmd.output().expect("spawn reslab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL_SWEEP: [&str; 8] = [
    "--set",
    "sweep.depths=4,8",
    "--set",
    "sweep.widths=16,32",
    "--set",
    "sweep.tau_modes=inverse_L,inverse_sqrt_L",
    "--set",
    "train.steps=30",
];

fn sweep_into(dir: &Path, workers: &str) -> Output {
    let mut args = vec!["sweep", "--seed", "21", "--workers", workers, "--out", dir.to_str().unwrap()];
    args.extend(SMALL_SWEEP);
    reslab(&args, None)
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "cells"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            let bytes = fs::read(&p).unwrap();
            // sidecars record the output directory, which differs between runs
            let text = String::from_utf8_lossy(&bytes).replace(dir.to_str().unwrap(), "<out>");
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), text.into_bytes()));
        }
    }
    out
}

#[test]
fn small_sweep_writes_cells_summary_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let o = sweep_into(dir.path(), "1");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 1 + 8);
    assert!(lines[0].starts_with("cell,L,m,tau_mode,tau,seed,"));
    assert!(!lines[0].contains("second"));
    // cell order: depth, then width, then tau mode; seed = master + index
    assert!(lines[1].starts_with("0,4,16,inverse_L,0.25,21,"));
    assert!(lines[2].starts_with("1,4,16,inverse_sqrt_L,0.5,22,"));
    assert!(lines[8].starts_with("7,8,32,inverse_sqrt_L,"));

    for i in 0..8 {
        let csv = dir.path().join(format!("cells/cell_{i:03}.csv"));
        let rows = fs::read_to_string(&csv).unwrap();
        assert!(rows.starts_with("step,loss,drift_top,drift_residual_max,diverged\n"));
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(csv.with_extension("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["cell_index"], i);
        assert_eq!(meta["master_seed"], 21);
        assert_eq!(meta["command"], "sweep");
        assert_eq!(meta["config"]["train"]["steps"], 30);
    }
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["files"][0], "summary.csv");
}

#[test]
fn rerun_is_byte_identical_across_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&sweep_into(a.path(), "1")), 0);
    assert_eq!(code(&sweep_into(b.path(), "2")), 0);
    assert_eq!(
        fs::read(a.path().join("summary.csv")).unwrap(),
        fs::read(b.path().join("summary.csv")).unwrap()
    );
    assert_eq!(read_tree(a.path()), read_tree(b.path()));
}

#[test]
fn spectral_product_at_zero_tau_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = reslab(
        &[
            "verify",
            "--set",
            "network.tau_mode=custom(0)",
            "--set",
            "verify.checks=spectral_product",
            "--set",
            "network.width=32",
            "--out",
            dir.path().to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(reports[0]["check_name"], "spectral_product");
    assert_eq!(reports[0]["measured"], 1.0);
    assert!(dir.path().join("verify.csv").exists());
    assert!(dir.path().join("verify.meta.json").exists());
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = reslab(
        &[
            "verify",
            "--set",
            "verify.checks=layer_norms",
            "--set",
            "verify.constant.layer_norms=1e-9",
            "--set",
            "verify.trials=3",
            "--out",
            dir.path().to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&o), 1);
    let csv = fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",false,"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["train", "--set", "network.nope=1", "--out", out],
        vec!["train", "--set", "network.depth=abc", "--out", out],
        vec!["train", "--set", "network.tau_mode=custom(-0.5)", "--out", out],
        vec![
            "train",
            "--set",
            "data.source=idx",
            "--set",
            "data.images=/does/not/exist",
            "--set",
            "data.labels=/does/not/exist",
            "--out",
            out,
        ],
        vec!["--out", out],
        vec!["train", "--config", "/does/not/exist.cfg"],
    ] {
        let o = reslab(&args, None);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn config_file_then_set_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(
        &cfg,
        "# small training run\ncommand = verify\nseed = 3\nnetwork.depth = 4\nnetwork.width = 16\ntrain.steps = 5\n",
    )
    .unwrap();
    let out = dir.path().join("env-out");
    let o = reslab(
        &["train", "--config", cfg.to_str().unwrap(), "--set", "network.depth=6", "--seed", "9"],
        Some(&out),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("train.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "train");
    assert_eq!(meta["master_seed"], 9);
    assert_eq!(meta["network"]["depth"], 6);
    assert_eq!(meta["network"]["width"], 16);
    assert_eq!(meta["config"]["train"]["steps"], 5);
    let rows = fs::read_to_string(out.join("train.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 6);
}

#[test]
fn idx_source_sets_the_input_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<Vec<u8>> = (0..12u8)
        .map(|i| (0..9u8).map(|j| if j == 8 { 0 } else { i.wrapping_mul(37).wrapping_add(j * 11) }).collect())
        .collect();
    let labels: Vec<u8> = (0..12u8).map(|i| i % 3).collect();
    let img = dir.path().join("img.idx");
    let lab = dir.path().join("lab.idx");
    fs::write(&img, encode_idx_images(3, 3, &images)).unwrap();
    fs::write(&lab, encode_idx_labels(&labels)).unwrap();
    let out = dir.path().join("out");
    let o = reslab(
        &[
            "train",
            "--set",
            "data.source=idx",
            "--set",
            &format!("data.images={}", img.display()),
            "--set",
            &format!("data.labels={}", lab.display()),
            "--set",
            "data.subset_n=10",
            "--set",
            "network.output_dim=3",
            "--set",
            "network.width=16",
            "--set",
            "network.depth=4",
            "--set",
            "train.steps=3",
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("train.meta.json")).unwrap()).unwrap();
    // the always-zero last pixel is dropped
    assert_eq!(meta["network"]["input_dim"], 8);
}

#[test]
fn explosion_and_spectral_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = reslab(
        &[
            "explosion",
            "--set",
            "network.depth=8",
            "--set",
            "network.width=32",
            "--set",
            "network.tau_mode=inverse_quarter_L",
            "--set",
            "explosion.trials=40",
            "--out",
            out,
        ],
        None,
    );
    assert!(matches!(code(&o), 0 | 1));
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("explosion.json")).unwrap()).unwrap();
    assert_eq!(r[0]["trials"], 40);
    assert_eq!(r[0]["direction"], "exceeds");

    let o = reslab(
        &[
            "spectral",
            "--set",
            "network.depth=8",
            "--set",
            "network.width=32",
            "--set",
            "network.tau_mode=inverse_L",
            "--set",
            "spectral.seeds=5",
            "--out",
            out,
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("spectral.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 + 1);
    assert!(csv.lines().last().unwrap().starts_with("spectral_product_worst,"));
}
