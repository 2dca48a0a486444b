use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noiseprint")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path) {
    ok(&["simulate", "--models", "2", "--images", "8", "--size", "80", "--seed", "3", "--out", s(dir)]);
}

fn tiny_train(data: &Path, out: &Path, iters: &str) -> Output {
    ok(&[
        "train", "--data", s(data), "--net-depth", "3", "--net-width", "3", "--iters", iters, "--groups", "2",
        "--members", "2", "--patch", "16", "--checkpoint-every", "5", "--out", s(out),
    ])
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["simulate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["extract", "--model", s(&dir.path().join("none.npwt")), "--image", "x.png", "--out", s(&dir.path().join("y.nprt"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(err.trim_end()).unwrap();
    assert_eq!(v["error"], "io");

    let out = run(&["simulate", "--models", "1", "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "config");

    let out = run(&["train", "--data", s(dir.path()), "--out", s(&dir.path().join("m.npwt"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_is_reproducible_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate(&a);
    simulate(&b);
    let manifest = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(manifest, std::fs::read(b.join("manifest.json")).unwrap());
    let entries: serde_json::Value = serde_json::from_slice(&manifest).unwrap();
    assert_eq!(entries.as_array().unwrap().len(), 16);

    let again = run(&["simulate", "--models", "2", "--images", "8", "--size", "80", "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(1));
    ok(&["simulate", "--models", "2", "--images", "8", "--size", "80", "--seed", "3", "--out", s(&a), "--force"]);
    assert_eq!(manifest, std::fs::read(a.join("manifest.json")).unwrap());
}

#[test]
fn train_writes_weights_log_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data);
    let model = dir.path().join("m.npwt");
    tiny_train(&data, &model, "10");
    let params = noiseprint::net::load_params(&model).unwrap();
    assert_eq!((params.config.depth, params.config.width), (3, 3));
    let log = std::fs::read_to_string(dir.path().join("m.npwt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["L0"].is_number() && v["R"].is_number() && v["L"].is_number());
    }

    // re-running from the echo file reproduces the weights
    let echo = dir.path().join("m.npwt.config.json");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&echo).unwrap()).unwrap();
    assert_eq!(v["params"]["train"]["iterations"], 10);
    let replay = dir.path().join("replay.npwt");
    ok(&["train", "--data", s(&data), "--config", s(&echo), "--out", s(&replay)]);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&replay).unwrap());

    let zero = dir.path().join("zero.npwt");
    let out = tiny_train(&data, &zero, "0");
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(noiseprint::net::load_params(&zero).is_ok());
    assert_eq!(std::fs::read_to_string(dir.path().join("zero.npwt.log.jsonl")).unwrap(), "");
}

#[test]
fn extract_localize_evaluate_identify() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data);
    let model = dir.path().join("m.npwt");
    tiny_train(&data, &model, "3");

    let image = data.join("images/m00_0000.png");
    let np = dir.path().join("np.nprt");
    ok(&["extract", "--model", s(&model), "--image", s(&image), "--out", s(&np), "--png"]);
    assert_eq!(noiseprint::raster::load_raster(&np).unwrap().dims(), (80, 80));
    assert!(dir.path().join("np.png").exists());

    let sp = dir.path().join("sp");
    ok(&["splice", "--data", s(&data), "--count", "2", "--split", "train", "--out", s(&sp)]);
    let heat = dir.path().join("heat");
    for c in ["case_000", "case_001"] {
        let out = heat.join(format!("{c}.nprt"));
        ok(&[
            "localize", "--model", s(&model), "--image", s(&sp.join(format!("images/{c}.png"))), "--out", s(&out),
            "--window", "32", "--dims", "4",
        ]);
        let diag: serde_json::Value =
            serde_json::from_slice(&std::fs::read(heat.join(format!("{c}.nprt.em.json"))).unwrap()).unwrap();
        assert!(diag["loglik_trace"].is_array() && diag["pi"].is_array() && diag["iterations"].is_number());
    }

    let report = dir.path().join("self.json");
    ok(&["evaluate", "--pred", s(&sp.join("gt")), "--gt", s(&sp.join("gt")), "--report", s(&report)]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["means"]["f1"], 1.0);
    assert_eq!(v["means"]["mcc"], 1.0);
    ok(&["evaluate", "--pred", s(&heat), "--gt", s(&sp.join("gt")), "--report", s(&dir.path().join("r.json"))]);

    let conf = dir.path().join("conf.json");
    let out = ok(&["identify", "--model", s(&model), "--data", s(&data), "--crop", "64", "--report", s(&conf)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&conf).unwrap()).unwrap();
    assert_eq!(v["confusion"]["models"], serde_json::json!([0, 1]));
    assert!(dir.path().join("conf.txt").exists());

    // outputs are not clobbered without --force
    let again = run(&["identify", "--model", s(&model), "--data", s(&data), "--crop", "64", "--report", s(&conf)]);
    assert_eq!(again.status.code(), Some(1));
}
