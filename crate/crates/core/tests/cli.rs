use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sphsfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphsfm")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    sphsfm(args).status.code().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let d = dir.to_str().unwrap();
    let mut args = vec!["--seed", "7", "synth", "--cameras", "8", "--points", "300", "-p", d];
    args.extend_from_slice(extra);
    assert_eq!(code(&args), 0);
}

#[test]
fn help_version_and_usage_errors() {
    let help = sphsfm(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("Usage"));
    assert_eq!(code(&["sfm", "--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["--unknown-flag"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["synth", "--layout", "spiral"]), 1);
    assert_eq!(code(&["--threads", "0", "eval"]), 1);
    assert_eq!(code(&["--config", "/nonexistent/config.toml", "eval"]), 1);
}

#[test]
fn pipeline_failures_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    let out = sphsfm(&["sfm", "-p", d]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no images"));
    for cmd in ["eval", "export-ply", "cubemap", "match"] {
        assert_eq!(code(&[cmd, "-p", d]), 2, "{cmd}");
    }
    synth(tmp.path(), &[]);
    // Cameras exist but no reconstruction yet.
    assert_eq!(code(&["eval", "-p", d]), 2);
    // Spatial pairs need positions for every image.
    fs::write(tmp.path().join("positions.txt"), "img_000 0 0 0\n").unwrap();
    assert_eq!(code(&["match", "--spatial", "5", "-p", d]), 2);
    // An impossible seed threshold fails the engine.
    let cfg = tmp.path().join("strict.toml");
    fs::write(&cfg, "[engine]\nseed_min_inliers = 100000\n").unwrap();
    assert_eq!(code(&["--config", cfg.to_str().unwrap(), "sfm", "--exhaustive", "-p", d]), 2);
}

#[test]
fn synth_sfm_eval_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    assert_eq!(code(&["--seed", "7", "synth", "--layout", "ring", "--cameras", "20", "--points", "500", "-p", d]), 0);
    assert_eq!(code(&["--seed", "7", "sfm", "-p", d, "--exhaustive"]), 0);
    let out = sphsfm(&["eval", "-p", d]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("all cameras registered"));
    let report = fs::read_to_string(tmp.path().join("report.txt")).unwrap();
    assert!(report.starts_with("registered 20/20\n"));
    assert_eq!(code(&["export-ply", "-p", d]), 0);
    let ply = fs::read_to_string(tmp.path().join("points.ply")).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0\n"));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("project.toml");
    let project = tmp.path().join("proj");
    fs::write(&cfg, format!("seed = 3\noutput_dir = \"{}\"\n[pairs]\nsequential = 2\n", project.display())).unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&["--config", c, "synth", "--cameras", "6", "--points", "300"]), 0);
    assert_eq!(code(&["--config", c, "match"]), 0);
    let matches = fs::read_to_string(project.join("matches.txt")).unwrap();
    assert_eq!(matches.matches("PAIR").count(), 5 + 4);
    assert_eq!(code(&["--config", c, "match", "--sequential", "1"]), 0);
    let matches = fs::read_to_string(project.join("matches.txt")).unwrap();
    assert_eq!(matches.matches("PAIR").count(), 5);
}

#[test]
fn rendered_rasters_feed_colors_and_cubemap() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    synth(tmp.path(), &["--width", "1024", "--height", "512", "--render"]);
    assert_eq!(code(&["sfm", "--exhaustive", "-p", d]), 0);
    let recon = fs::read_to_string(tmp.path().join("reconstruction.txt")).unwrap();
    let colored = recon
        .lines()
        .skip_while(|l| !l.starts_with("POINTS"))
        .skip(1)
        .take_while(|l| !l.starts_with("OBS"))
        .filter(|l| !l.contains(" 128 128 128 "))
        .count();
    assert!(colored > 100, "{colored}");
    assert_eq!(code(&["cubemap", "--face-size", "64", "-p", d]), 0);
    let manifest = fs::read_to_string(tmp.path().join("cubemap/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 8 * 6);
}
