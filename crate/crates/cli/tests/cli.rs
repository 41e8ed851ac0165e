use std::path::Path;
use std::process::{Command, Output};

fn imupose(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imupose"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"
seed = 5
[corpus]
sequences_per_type = 1
frames = 45
[network]
hidden = [8, 6, 8]
[train]
epochs = 2
batch_size = 16
[stream]
rate = 0.0
"#;

#[test]
fn full_command_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    let ok = |args: &[&str]| {
        let out = imupose(d, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["--config", "small.toml", "synthesize"]);
    assert!(d.join("corpus/manifest.toml").is_file());
    ok(&["--config", "small.toml", "train"]);
    assert!(d.join("model/weights.bin").is_file());
    assert_eq!(std::fs::read_to_string(d.join("model/loss.csv")).unwrap().lines().count(), 3);

    let imu = std::fs::read_dir(d.join("corpus/imu")).unwrap().next().unwrap().unwrap().path();
    let imu = imu.to_str().unwrap();
    ok(&["--config", "small.toml", "estimate", imu, "pred/a.motion"]);
    assert!(d.join("pred/a.torques.csv").is_file());
    ok(&["--config", "small.toml", "--physics", "off", "estimate", imu, "pred/b.motion", "--torques", "b.csv"]);
    let streamed = ok(&["--config", "small.toml", "stream", imu]);
    assert!(String::from_utf8(streamed.stdout).unwrap().starts_with("imupose-stream v1"));
    ok(&["--config", "small.toml", "calibrate", imu, "--out", "cal.txt"]);
    assert!(d.join("cal.txt").is_file());

    let gt = std::fs::read_dir(d.join("corpus/motion")).unwrap().next().unwrap().unwrap().path();
    let eval = ok(&["--config", "small.toml", "evaluate", "pred/a.motion", gt.to_str().unwrap()]);
    assert!(String::from_utf8(eval.stdout).unwrap().contains("Ang Err"));
    assert!(d.join("reports/report.csv").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Unknown config key.
    std::fs::write(d.join("bad.toml"), "nonsense = 1\n").unwrap();
    assert_eq!(imupose(d, &["--config", "bad.toml", "synthesize"]).status.code(), Some(2));
    // Missing weights.
    assert_eq!(imupose(d, &["estimate", "x.imu", "y.motion"]).status.code(), Some(2));
    // Bad usage.
    assert_eq!(imupose(d, &["frobnicate"]).status.code(), Some(2));
    // Unreadable IMU data once weights exist.
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    assert!(imupose(d, &["--config", "small.toml", "synthesize"]).status.success());
    assert!(imupose(d, &["--config", "small.toml", "train"]).status.success());
    std::fs::write(d.join("junk.imu"), "junk\n").unwrap();
    let out = imupose(d, &["--config", "small.toml", "estimate", "junk.imu", "y.motion"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[3]"));
}
