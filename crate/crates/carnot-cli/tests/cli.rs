use std::fs;
use std::process::Command;

fn carnot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_carnot"))
}

#[test]
fn dist_heisenberg_vertical_hits_known_value() {
    let dir = std::env::temp_dir().join(format!("carnot-cli-dist-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    let prefix = dir.join("d");
    let output = carnot()
        .args([
            "dist",
            "--rank",
            "2",
            "--to",
            "0,0,1",
            "--out",
            prefix.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");

    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("d.json")).unwrap()).unwrap();
    let upper = parsed["upper"].as_f64().unwrap();
    let exact = 2.0 * std::f64::consts::PI.sqrt();
    assert!(
        (upper - exact).abs() / exact < 0.01,
        "upper {upper} vs {exact}"
    );

    // CSV carries a header row; the sidecar carries the config hash.
    let csv = fs::read_to_string(dir.join("d.csv")).unwrap();
    assert!(csv.starts_with("lower,upper,width,converged\n"));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("d.meta.json")).unwrap()).unwrap();
    assert!(meta["config_hash"].as_str().unwrap().len() == 64);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn selftest_exits_zero() {
    let output = carnot()
        .args(["selftest", "--rank", "2", "--seed", "7", "--scale", "0.1"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("all suites passed"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let output = carnot().arg("frobnicate").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn bad_flags_are_usage_errors() {
    let output = carnot()
        .args(["dist", "--rank", "2", "--to", "not,a,number"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn outputs_are_byte_deterministic() {
    let dir = std::env::temp_dir().join(format!("carnot-cli-det-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let prefix = dir.join(format!("r{run}"));
        let output = carnot()
            .args([
                "engel-scan",
                "--points",
                "5",
                "--seed",
                "123",
                "--out",
                prefix.to_str().unwrap(),
            ])
            .env("RAYON_NUM_THREADS", if run == 0 { "1" } else { "4" })
            .output()
            .unwrap();
        assert!(output.status.success(), "{output:?}");
        files.push((
            fs::read(dir.join(format!("r{run}.json"))).unwrap(),
            fs::read(dir.join(format!("r{run}.csv"))).unwrap(),
        ));
    }
    assert_eq!(files[0].0, files[1].0, "JSON outputs differ across runs");
    assert_eq!(files[0].1, files[1].1, "CSV outputs differ across runs");
    fs::remove_dir_all(&dir).ok();
}
