use std::path::Path;
use std::process::{Command, Output};

fn fbsde(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsde"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn check_passes_on_presets() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["experiment1", "experiment2", "linear-oracle"] {
        let out = dir.path().join(preset);
        let o = fbsde(&["check", "--preset", preset], &out);
        assert_eq!(o.status.code(), Some(0), "{preset}: {}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("check.json")).unwrap()).unwrap();
        assert_eq!(v["passed"], true);
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(fbsde(&["convergence", "--bogus"], out).status.code(), Some(2));
    assert_eq!(fbsde(&["check", "--scheme", "midpoint"], out).status.code(), Some(2));
    assert_eq!(fbsde(&["check", "--preset", "custom"], out).status.code(), Some(2));
    assert_eq!(fbsde(&["check", "--R0", "-1"], out).status.code(), Some(2));
    let bad = out.join("bad.toml");
    std::fs::write(&bad, "[run]\nsteps = 3\n").unwrap();
    assert_eq!(
        fbsde(&["check", "--config", bad.to_str().unwrap()], out).status.code(),
        Some(2)
    );
}

#[test]
fn convergence_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conv");
    let o = fbsde(
        &["convergence", "--preset", "linear-oracle", "--scheme", "fp", "--Ns", "10,20,40", "--fd-dx", "0"],
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(header(&out.join("convergence_fp.csv")), "N,h,Y0,err,seconds,exploded");
    let rows = std::fs::read_to_string(out.join("convergence_fp.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    let linear = v["oracle"]["linear"].as_f64().unwrap();
    assert!((linear - 2.25 * (-1.0f64).exp()).abs() < 1e-12);

    let quiet = dir.path().join("quiet");
    let o = fbsde(
        &["convergence", "--preset", "linear-oracle", "--scheme", "fp", "--Ns", "10", "--fd-dx", "0", "--no-timing"],
        &quiet,
    );
    assert!(o.status.success());
    assert_eq!(header(&quiet.join("convergence_fp.csv")), "N,h,Y0,err,exploded");
}

#[test]
fn stability_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = fbsde(&["stability", "--preset", "experiment2", "--no-timing"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for n in [15, 17, 19, 25] {
        for label in ["explicit", "implicit", "fp"] {
            let p = dir.path().join(format!("minmax_{label}_N{n}.csv"));
            assert_eq!(header(&p), "level,t,max,min,l2,finite");
        }
    }
    assert!(dir.path().join("stability.json").exists());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        r#"
preset = "custom"
[model]
T = 1.0
sigma = 1.5
[driver]
coefficients = [0.0, -1.0]
[terminal]
kind = "quadratic"
scale = 1.0
[run]
scheme = "implicit"
Ns = [10, 20]
fd-dx = 0.0
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = fbsde(
        &["convergence", "--config", cfg.to_str().unwrap(), "--scheme", "fp", "--no-timing"],
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("convergence_fp.csv").exists());
    assert!(!out.join("convergence_implicit.csv").exists());
}

#[test]
fn lattice_dump_is_json() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("lattice.json");
    let o = fbsde(
        &["check", "--preset", "experiment1", "--Ns", "4", "--dump-lattice", dump.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let _: serde_json::Value = serde_json::from_slice(&std::fs::read(dump).unwrap()).unwrap();
}
