use std::path::Path;
use std::process::Command;

fn cli(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_uav-intent"))
        .args(["--log", "warn"])
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"
name = "cli-test"
master_seed = 11

[counts]
direct_attack = 3
harmless = 3
surveillance = 3

[features]
window = 50
overlap = 0.9
max_train_windows_per_trajectory = 5

[training]
epochs = 1

[splits]
n_splits = 2
validation_fraction = 0.34
"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");

    let msg = cli(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    assert!(msg.contains("wrote 9 trajectories"), "{msg}");
    for f in ["manifest.json", "trajectories.jsonl", "windows.csv"] {
        assert!(data.join(f).exists(), "{f} missing");
    }

    cli(&["track", "--data", s(&data)]);
    let msg = cli(&["features", "--data", s(&data), "--window", "30", "--overlap", "0.5"]);
    assert!(msg.contains("windows of 30 steps"), "{msg}");

    let model = dir.path().join("model.json");
    cli(&["train", "--data", s(&data), "--out", s(&model), "--emit-plots"]);
    assert!(dir.path().join("model.history.csv").exists());

    let eval: serde_json::Value =
        serde_json::from_str(&cli(&["eval", "--data", s(&data), "--model", s(&model)])).unwrap();
    assert!(eval["accuracy"].as_f64().unwrap() >= 0.0);

    let detections = std::fs::read_dir(data.join("detections"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let posterior = cli(&["infer", "--model", s(&model), "--detections", s(&detections)]);
    assert!(
        posterior.starts_with("tau,p_direct_attack,p_harmless,p_surveillance"),
        "{posterior}"
    );
    for line in posterior.lines().skip(1) {
        let sum: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    let report_dir = dir.path().join("report");
    let msg = cli(&["report", "--data", s(&data), "--out", s(&report_dir), "--emit-plots"]);
    assert!(msg.contains("over 2 splits"), "{msg}");
    assert!(report_dir.join("report.json").exists());
    assert!(report_dir.join("history_split0.csv").exists());
}

#[test]
fn rejects_bad_dimensionality() {
    let out = Command::new(env!("CARGO_BIN_EXE_uav-intent"))
        .args(["generate", "--dim", "4d", "--out", "/nonexistent"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn config_presets_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["desk", "reference-2d"] {
        let text = cli(&["config", "--preset", preset, "--window", "50"]);
        let path = dir.path().join(format!("{preset}.toml"));
        std::fs::write(&path, &text).unwrap();
        let again = cli(&["config", "--config", s(&path)]);
        assert_eq!(text, again);
        assert!(text.contains("window = 50"));
    }
}
