use std::path::PathBuf;
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

fn hartlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hartlab"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn constants_two_point_json() {
    let cfg = scenario("two_point.json");
    let o = hartlab(&["constants", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let c = &v["constants"];
    assert!((c["norm"].as_f64().unwrap() - 12.0).abs() < 1e-12);
    assert!((c["testing"].as_f64().unwrap() - 116f64.sqrt()).abs() < 1e-12);
    assert_eq!(c["common_atom"], serde_json::Value::Bool(true));
    assert!(v.get("timestamp").is_none());
}

#[test]
fn constants_csv_has_pooled_row() {
    let cfg = scenario("line_disjoint.json");
    let o = hartlab(&[
        "constants",
        "--config",
        cfg.to_str().unwrap(),
        "--csv",
        "--grids",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "grid,a2,a2_dual,testing,testing_dual,pivotal,pivotal_dual,norm,ratio,common_atom"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("pooled,"));
}

#[test]
fn same_seed_same_bytes_and_out_file() {
    let cfg = scenario("line_lognormal.json");
    let dir = std::env::temp_dir().join(format!("hartlab-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let a = dir.join("a.json");
    let b = dir.join("b.json");
    for out in [&a, &b] {
        let o = hartlab(&[
            "constants",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "17",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn verify_all_passes_on_samples() {
    for name in ["two_point.json", "line_disjoint.json", "tree_power.json"] {
        let cfg = scenario(name);
        let o = hartlab(&["verify", "all", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stdout(&o));
        assert!(stdout(&o).contains("[haar]"));
    }
}

#[test]
fn surgery_csv_columns() {
    let cfg = scenario("line_disjoint.json");
    let o = hartlab(&[
        "surgery",
        "--config",
        cfg.to_str().unwrap(),
        "--trials",
        "500",
        "--tau-grid",
        "0.1:0.2:2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "tau,estimate,stderr,analytic_1d");
    assert!(rows[1].starts_with("0.1,") && rows[1].ends_with(",0.2"));
}

#[test]
fn corona_and_ensemble_run() {
    let cfg = scenario("line_disjoint.json");
    let o = hartlab(&[
        "corona",
        "--config",
        cfg.to_str().unwrap(),
        "--modes",
        "stopping_mass,beta",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 2);
    let o = hartlab(&[
        "ensemble",
        "--config",
        cfg.to_str().unwrap(),
        "--trials",
        "3",
        "--csv",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 4);
}

#[test]
fn config_errors_exit_with_two() {
    let cfg = scenario("line_disjoint.json");
    let o = hartlab(&[
        "corona",
        "--config",
        cfg.to_str().unwrap(),
        "--modes",
        "delta",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = hartlab(&["verify", "everything", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = hartlab(&["constants", "--config", "/nonexistent/scenario.json"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = std::env::temp_dir().join(format!("hartlab-bad-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("bad.json");
    std::fs::write(
        &bad,
        r#"{"space": {"kind": "grid1d"}, "params": {"lambda": 0.9}}"#,
    )
    .unwrap();
    let o = hartlab(&["constants", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/space"));
    std::fs::remove_dir_all(&dir).unwrap();
}
