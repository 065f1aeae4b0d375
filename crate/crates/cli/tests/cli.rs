use std::fs;
use std::process::Command;

fn arcvc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_arcvc"))
}

#[test]
fn default_config_round_trips() {
    let out = arcvc().arg("default-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[trainer]") && text.contains("[risk]"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, &text).unwrap();
    let out = arcvc()
        .args(["shaping", "--seeds", "0", "--set", "shaping.fortune_max=5", "--set", "shaping.n_per_state=20", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synthetic_shaping_writes_versioned_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = arcvc()
        .args(["shaping", "--seeds", "1,2"])
        .args(["--set", "shaping.synthetic={ b = 2.0, c = -1.0, sigma = 0.0, n = 100, z_min = -3.0, z_max = 1.0 }"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let fit = fs::read_to_string(dir.path().join("shaping_fit.csv")).unwrap();
    let mut lines = fit.lines();
    assert_eq!(lines.next(), Some("#schema=shaping_fit v1"));
    assert_eq!(lines.next(), Some("seed,b,c,rss,n"));
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert!((cols[1] - 2.0).abs() < 1e-4 && (cols[2] + 1.0).abs() < 1e-4, "{line}");
    }
    assert!(dir.path().join("config.toml").is_file());
}

#[test]
fn small_risk_comparison_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = arcvc()
        .args(["risk-comparison", "--seeds", "0..2", "--workers", "2"])
        .args(["--set", "trainer.episodes=5", "--set", "env.width=5", "--set", "env.height=5", "--set", "env.target=[0, 4]"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("risk_comparison.csv")).unwrap();
    assert_eq!(summary.lines().filter(|l| l.starts_with("run,")).count(), 6);
    assert!(dir.path().join("checkpoints/sqrt/seed_1/final/actor.params").is_file());
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for set in ["risk.lambda=0", "trainer.no_such_key=1", "trainer.reference=median", "env.p_mine=2"] {
        let out = arcvc().args(["penalty-study", "--set", set]).arg("--out").arg(dir.path()).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{set}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{set}");
    }
    let out = arcvc().args(["shaping", "--seeds", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = arcvc().args(["shaping", "--config", "/nonexistent/arcvc.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
