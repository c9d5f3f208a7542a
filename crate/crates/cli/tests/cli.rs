use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scoredistill")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn runs_need_seed_and_out() {
    assert!(!run(&["distill2d", "--out", "x"]).status.success());
    assert!(!run(&["distill2d", "--seed", "1"]).status.success());
    assert!(!run(&["distill3d-toy", "--seed", "1"]).status.success());
}

#[test]
fn distill2d_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<String> = ["csm", "sds"]
        .iter()
        .map(|loss| {
            let out = dir.path().join(loss);
            let o = out.to_str().unwrap();
            let stdout = ok(&run(&[
                "distill2d", "--seed", "4", "--out", o, "--backend", "mixture-oracle", "--loss", loss,
                "--iterations", "20", "--snapshot-every", "5", "--label", "2",
            ]));
            assert!(stdout.contains("final_distance"));
            assert!(out.join("metrics.csv").is_file());
            o.to_string()
        })
        .collect();
    let config = std::fs::read_to_string(Path::new(&runs[0]).join("config.toml")).unwrap();
    assert!(config.contains("label = 2"));
    let figures = dir.path().join("figures");
    let mut args = vec!["report", "--out", figures.to_str().unwrap()];
    args.extend(runs.iter().map(String::as_str));
    ok(&run(&args));
    assert!(figures.join("curves.svg").is_file());

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = run(&["report", "--out", figures.to_str().unwrap(), empty.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no run artifacts"));
}

#[test]
fn config_file_overlay_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(&good, "iterations = 3\n[guidance]\ncfg_scale = 5.0\n").unwrap();
    let out = dir.path().join("run");
    ok(&run(&[
        "distill2d", "--seed", "1", "--out", out.to_str().unwrap(), "--backend", "mixture-oracle",
        "--config", good.to_str().unwrap(),
    ]));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "iterations = 3\ncfg_sclae = 5.0\n").unwrap();
    let o = run(&[
        "distill2d", "--seed", "1", "--out", out.to_str().unwrap(), "--backend", "mixture-oracle",
        "--config", bad.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}

#[test]
fn divergence_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "distill2d", "--seed", "1", "--out", out.to_str().unwrap(), "--backend", "mixture-oracle", "--loss", "sds",
        "--step-size", "1e308", "--iterations", "50",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(out.join("last_good.json").is_file());
}

#[test]
fn invert_and_backend_info() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("inv");
    let stdout = ok(&run(&[
        "invert", "--seed", "1", "--out", out.to_str().unwrap(), "--backend", "mixture-oracle", "--x0", "-1,1",
        "--label", "1", "--delta-t", "10",
    ]));
    assert!(stdout.contains("rungs 50"));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 51);
    let result: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("inversion.json")).unwrap()).unwrap();
    assert!(result["rel_l2"].as_f64().unwrap() < 0.1);

    let info = ok(&run(&["backend", "info", "--backend", "mixture-oracle"]));
    let v: serde_json::Value = serde_json::from_str(&info).unwrap();
    assert_eq!(v["capabilities"]["latent_shape"], serde_json::json!([2]));
    assert!(!run(&["backend", "info", "--backend", "toy"]).status.success());
    assert!(!run(&["backend", "info", "--backend", "external"]).status.success());
}

#[test]
fn self_guidance_needs_the_external_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "distill2d", "--seed", "1", "--out", dir.path().to_str().unwrap(), "--backend", "mixture-oracle",
        "--self-guidance", "--iterations", "2",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("self-guidance"));
}

#[test]
fn train_toy_then_distill() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("toy");
    ok(&run(&["train-toy", "--seed", "2", "--out", w.to_str().unwrap(), "--steps", "50"]));
    let weights = w.join("toy.bin");
    assert!(weights.is_file());
    let info = ok(&run(&["backend", "info", "--weights", weights.to_str().unwrap()]));
    assert!(info.contains("supports_perturbed_attention"));
    let out = dir.path().join("run");
    ok(&run(&[
        "distill2d", "--seed", "1", "--out", out.to_str().unwrap(), "--weights", weights.to_str().unwrap(),
        "--loss", "vpcsm", "--pag-scale", "1.0", "--iterations", "5",
    ]));
    let o = run(&["train-toy", "--seed", "2", "--out", w.to_str().unwrap(), "--steps", "5", "--eps-mse-threshold", "0.01"]);
    assert!(!o.status.success());
}
