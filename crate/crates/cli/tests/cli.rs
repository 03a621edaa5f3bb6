use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn nullface() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nullface"))
}

fn run(args: &[&str]) -> Output {
    nullface().args(args).output().expect("nullface runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    let v: Value = serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr)));
    v["error"].clone()
}

fn faces() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy-faces")
}

fn face(i: usize) -> String {
    faces().join(format!("face_{i:02}.png")).display().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_documents_every_flag_with_its_range() {
    let top = String::from_utf8(run(&["--help"]).stdout).unwrap();
    for cmd in ["invert", "anonymize", "mask", "eval", "sweep", "attack", "replay", "toy-set", "serve"] {
        assert!(top.contains(cmd), "top-level help lacks {cmd}");
    }
    let help = String::from_utf8(run(&["anonymize", "--help"]).stdout).unwrap();
    for (flag, range) in [
        ("--steps", ">= 1"),
        ("--t-skip", "0..=steps"),
        ("--lambda-id", ">= 0"),
        ("--cfg", "finite"),
        ("--lambda-img", ">= 0"),
        ("--mask-start", "0..=steps"),
        ("--seed", "0..=2^64-1"),
        ("--mask-preset", "keep-eyes-nose"),
    ] {
        let line = help
            .lines()
            .skip_while(|l| !l.trim_start().starts_with(flag))
            .take(2)
            .collect::<Vec<_>>()
            .join(" ");
        assert!(line.contains(range), "{flag}: `{line}`");
    }
}

#[test]
fn usage_errors_are_structured() {
    let out = run(&["invert", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["class"], "usage");

    let tmp = tempfile::tempdir().unwrap();
    let rec = tmp.path().join("rec");
    stdout_json(&run(&["invert", "--image", &face(0), "--steps", "10", "--out", p(&rec)]));
    let out = run(&["anonymize", "--record", p(&rec), "--t-skip", "11", "--out", p(&tmp.path().join("a.png"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_error(&out);
    assert_eq!(err["class"], "usage");
    assert!(err["message"].as_str().unwrap().contains("t_skip"), "{err}");

    let out = run(&["anonymize", "--record", p(&rec), "--lambda-id", "-1", "--out", p(&tmp.path().join("a.png"))]);
    assert_eq!(out.status.code(), Some(2));

    // A record made with a different step count is refused.
    let out = run(&["anonymize", "--record", p(&rec), "--steps", "20", "--out", p(&tmp.path().join("a.png"))]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn eval_of_originals_against_themselves() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("r.csv");
    let out = run(&["eval", "--originals", p(&faces()), "--anonymized", p(&faces()), "--report", p(&report)]);
    let summary = stdout_json(&out);
    let agg = &summary["results"][0];
    assert_eq!(agg["reid_percent"], 100.0);
    assert_eq!(agg["mean_identity_distance"], 0.0);
    assert!(agg["frechet_distance"].as_f64().unwrap().abs() < 1e-8);
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16 + 1);
}

#[test]
fn config_file_supplies_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = tmp.path().join("rec");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, format!("# invert defaults\nimage = {}\nsteps = 12\nseed = 5\n", face(1))).unwrap();
    let out = stdout_json(&run(&["invert", "--config", p(&cfg), "--seed", "6", "--out", p(&rec)]));
    assert_eq!(out["command"], "invert");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("rec.run.json")).unwrap()).unwrap();
    assert_eq!(manifest["params"]["steps"], "12");
    assert_eq!(manifest["params"]["seed"], "6");

    fs::write(&cfg, "colour = red\n").unwrap();
    let out = run(&["invert", "--config", p(&cfg), "--image", &face(1), "--out", p(&rec)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = tmp.path().join("rec");
    let a = tmp.path().join("a.png");
    stdout_json(&run(&["invert", "--image", &face(2), "--steps", "15", "--out", p(&rec)]));
    stdout_json(&run(&["anonymize", "--record", p(&rec), "--t-skip", "5", "--mask-start", "5", "--out", p(&a)]));

    let same = tmp.path().join("same.png");
    let manifest = format!("{}.run.json", a.display());
    stdout_json(&run(&["replay", "--manifest", &manifest, "--set", &format!("out={}", same.display())]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&same).unwrap());

    let other = tmp.path().join("other.png");
    stdout_json(&run(&[
        "replay",
        "--manifest",
        &manifest,
        "--set",
        &format!("out={}", other.display()),
        "--set",
        "mask_preset=whole-face",
    ]));
    assert_ne!(fs::read(&a).unwrap(), fs::read(&other).unwrap());
    let m: Value = serde_json::from_str(&fs::read_to_string(format!("{}.run.json", other.display())).unwrap()).unwrap();
    assert_eq!(m["params"]["mask_preset"], "whole-face");

    let out = run(&["replay", "--manifest", &manifest, "--set", "colour=red"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mask_and_attack_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let mask = tmp.path().join("m.png");
    let out = stdout_json(&run(&["mask", "--image", &face(3), "--anonymize", "skin,nose", "--keep", "eyes", "--out", p(&mask)]));
    let mean = out["results"]["mean"].as_f64().unwrap();
    assert!(mean > 0.0 && mean < 1.0);

    let full = tmp.path().join("full.png");
    stdout_json(&run(&["mask", "--image", &face(3), "--resolution", "image", "--out", p(&full)]));
    let full_mask = nullface_core::masks::load_mask_file(&full, None).unwrap();
    assert_eq!((full_mask.width(), full_mask.height()), (64, 64));
    let latent_mask = nullface_core::masks::load_mask_file(&mask, None).unwrap();
    assert_eq!((latent_mask.width(), latent_mask.height()), (32, 32));

    let out = run(&["mask", "--image", &face(3), "--anonymize", "eyes", "--keep", "eyes", "--out", p(&mask)]);
    assert_eq!(out.status.code(), Some(2));

    let rec = tmp.path().join("rec");
    let anon = tmp.path().join("anon.png");
    stdout_json(&run(&["invert", "--image", &face(3), "--steps", "30", "--out", p(&rec)]));
    stdout_json(&run(&["anonymize", "--record", p(&rec), "--t-skip", "10", "--mask-start", "10", "--out", p(&anon)]));
    let att = tmp.path().join("att.png");
    let out = stdout_json(&run(&[
        "attack",
        "--original",
        &face(3),
        "--anonymized",
        p(&anon),
        "--steps",
        "30",
        "--t-skip",
        "10",
        "--mask-start",
        "10",
        "--out",
        p(&att),
    ]));
    assert!(out["results"]["attacked_distance"].as_f64().is_some());
    assert!(att.exists());
}

#[test]
fn sweep_grid_file_and_inline_axes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    stdout_json(&run(&["toy-set", "--out", p(&data), "--count", "4", "--seed", "9"]));
    let grid = tmp.path().join("grid.txt");
    fs::write(&grid, "lambda_id = 0, 1\nmask_preset = keep-eyes, whole-face\n").unwrap();
    let report = tmp.path().join("s.csv");
    let out = stdout_json(&run(&[
        "sweep",
        "--dataset",
        p(&data),
        "--grid",
        p(&grid),
        "--axis",
        "lambda_id=0.5",
        "--steps",
        "20",
        "--t-skip",
        "8",
        "--mask-start",
        "8",
        "--report",
        p(&report),
    ]));
    assert_eq!(out["results"]["cells_planned"], 2);
    assert_eq!(out["results"]["cells_completed"], 2);
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.lines().filter(|l| l.starts_with("aggregate,")).all(|l| l.contains(",0.5,")));

    let out = run(&["sweep", "--dataset", p(&data), "--axis", "lambda_id=-1", "--report", p(&report)]);
    assert_eq!(out.status.code(), Some(2));
}

fn write_exec_manifests(dir: &Path) {
    let host = env!("CARGO_BIN_EXE_nullface-toy-host");
    fs::write(
        dir.join("host-pointwise.manifest"),
        format!(
            "name = host-pointwise\nversion = 1\nkind = backbone\nlatent_shape = 12x32x32\nembedding_dim = 64\n\
             determinism = exact\nmax_concurrency = 1\nlaunch = exec:{host} toy-pointwise 12x32x32 0\n"
        ),
    )
    .unwrap();
    fs::write(
        dir.join("host-stats.manifest"),
        format!(
            "name = host-stats\nversion = 1\nkind = embedder\nembedding_dim = 64\ndeterminism = exact\n\
             max_concurrency = 1\nlaunch = exec:{host} toy-pointwise 12x32x32 0\n"
        ),
    )
    .unwrap();
}

#[test]
fn exec_plugins_match_builtins() {
    let tmp = tempfile::tempdir().unwrap();
    let plugins = tmp.path().join("plugins");
    fs::create_dir(&plugins).unwrap();
    write_exec_manifests(&plugins);

    let mut outputs = Vec::new();
    for (backend, embedder) in [("toy-pointwise", "toy-stats"), ("host-pointwise", "host-stats")] {
        let rec = tmp.path().join(format!("rec-{backend}"));
        let out = tmp.path().join(format!("{backend}.png"));
        let ok = nullface()
            .env("NULLFACE_PLUGIN_PATH", &plugins)
            .args(["invert", "--image", &face(4), "--steps", "12", "--backend", backend, "--embedder", embedder, "--out", p(&rec)])
            .output()
            .unwrap();
        stdout_json(&ok);
        let res = nullface()
            .env("NULLFACE_PLUGIN_PATH", &plugins)
            .args(["anonymize", "--record", p(&rec), "--t-skip", "4", "--mask-start", "4", "--out", p(&out)])
            .output()
            .unwrap();
        let summary = stdout_json(&res);
        outputs.push((fs::read(&out).unwrap(), summary["results"]["identity_distance"].clone()));
    }
    assert_eq!(outputs[0], outputs[1]);

    // Without the search path the external names are unknown plugins.
    let out = nullface()
        .env_remove("NULLFACE_PLUGIN_PATH")
        .args(["invert", "--image", &face(4), "--backend", "host-pointwise", "--out", p(&tmp.path().join("x"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_error(&out)["class"], "plugin");
}
