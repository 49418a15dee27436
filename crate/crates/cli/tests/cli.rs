use std::path::PathBuf;
use std::process::Command;

fn lgss() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lgss"))
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let out = lgss().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn identify_on_packaged_sample_writes_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let out = lgss()
        .args(["identify", "--nx", "2", "--nw", "1", "--max-iters", "2", "--data"])
        .arg(data("sample.csv"))
        .arg("--output")
        .arg(&model)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m: lgss_core::model::ExplicitModel = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(m.dims().nx, 2);
    assert!(m.spectral_radius() < 1.0);
}

#[test]
fn baseline_rejects_singular_structure_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = lgss()
        .args(["identify", "--nx", "2", "--nw", "1", "--algorithm", "states", "--data"])
        .arg(data("sample.csv"))
        .arg("--output")
        .arg(dir.path().join("m.json"))
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn simulate_is_reproducible_and_carries_provenance() {
    let run = || {
        lgss()
            .args(["simulate", "--horizon", "20", "--seed", "5", "--model"])
            .arg(data("msd_model.json"))
            .output()
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# lgss v"));
    assert_eq!(lines.next().unwrap(), "t,u1,y1,x1,x2");
    assert_eq!(text.lines().count(), 22);
}

#[test]
fn experiment_csv_is_byte_identical_on_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for rep in 0..2 {
        let p = dir.path().join(format!("{rep}.csv"));
        let st = lgss()
            .args(["experiment", "bound-sweep", "--seed", "9", "--set", "grid.points=5", "--config"])
            .arg(data("bound_sweep.json"))
            .arg("--output")
            .arg(&p)
            .status()
            .unwrap();
        assert!(st.success());
        outs.push(std::fs::read_to_string(&p).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    let first = outs[0].lines().next().unwrap();
    assert!(first.contains("config_sha256=") && first.contains("seed=9"), "{first}");
    assert!(outs[0].lines().any(|l| l == "regime,A,loglik,Q_ls,Q_ld,Qbar"));
}

#[test]
fn config_errors_exit_one() {
    let st = lgss().args(["experiment", "singular", "--seed", "1", "--set", "horizon=0"]).status().unwrap();
    assert_eq!(st.code(), Some(1));
    let st = lgss().args(["experiment", "singular", "--seed", "1", "--config", "/nonexistent.json"]).status().unwrap();
    assert_eq!(st.code(), Some(1));
}
