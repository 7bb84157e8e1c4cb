use std::path::Path;
use std::process::{Command, Output};

use phmat::artifact::{self, Artifact};
use phmat::config::ExperimentConfig;
use phmat::harness::generate_points;
use phmat::output::read_csv;
use phmat_core::kernels::EvalCounter;
use phmat_core::phmatrix::{ParametricH2Matrix, ParametricHMatrix};

const SMALL: &[&str] = &["--kernel", "mc", "--n", "400", "--d", "2", "--lmax", "3", "--ps", "8", "--ptheta", "12"];

fn phmat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phmat")).arg("--serial").args(args).output().expect("spawn phmat")
}

fn ok(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout:\n{text}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    text
}

fn small_config(method: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for pair in SMALL.chunks(2) {
        cfg.set(pair[0].trim_start_matches("--"), pair[1]).unwrap();
    }
    cfg.set("method", method).unwrap();
    cfg
}

fn read_vec(path: &Path) -> Vec<f64> {
    std::fs::read_to_string(path).unwrap().split_whitespace().map(|t| t.parse().unwrap()).collect()
}

fn build_and_instantiate(method: &str) {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("m.phmt");
    let (xp, yp) = (dir.path().join("x.txt"), dir.path().join("y.txt"));
    let mut args = vec!["build", "--method", method, "--artifact", art.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let text = ok(&phmat(&args));
    assert!(text.contains("offline time"));

    let x: Vec<f64> = (0..400).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
    std::fs::write(&xp, x.iter().map(|v| format!("{v:e}\n")).collect::<String>()).unwrap();
    let text = ok(&phmat(&[
        "instantiate",
        "--artifact",
        art.to_str().unwrap(),
        "--theta",
        "0.6",
        "--x",
        xp.to_str().unwrap(),
        "--y",
        yp.to_str().unwrap(),
        "--check",
    ]));
    assert!(text.contains("online evals      0"), "{text}");
    let err: f64 = text.lines().find(|l| l.starts_with("sampled error")).unwrap().split_whitespace().last().unwrap().parse().unwrap();
    assert!(err <= 1e-4, "{err}");

    let cfg = small_config(method);
    let pts = generate_points(cfg.n, cfg.d, cfg.seed).unwrap();
    let spec = cfg.kernel_spec().unwrap();
    let cnt = EvalCounter::new();
    let want = match method {
        "param-h" => ParametricHMatrix::build(pts, spec, cfg.build_config(), &cnt).unwrap().instantiate(&[0.6], &cnt).unwrap().mvm(&x),
        _ => ParametricH2Matrix::build(pts, spec, cfg.build_config(), &cnt).unwrap().instantiate(&[0.6], &cnt).unwrap().mvm(&x),
    }
    .unwrap();
    assert_eq!(read_vec(&yp), want);

    let loaded = artifact::load(&art).unwrap();
    assert_eq!(matches!(loaded, Artifact::H2(_)), method == "param-h2");
    assert_eq!(artifact::to_bytes(&loaded), std::fs::read(&art).unwrap());
}

#[test]
fn build_then_instantiate_h() {
    build_and_instantiate("param-h");
}

#[test]
fn build_then_instantiate_h2() {
    build_and_instantiate("param-h2");
}

#[test]
fn truncated_artifact_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("m.phmt");
    let mut args = vec!["build", "--near-mode", "direct", "--artifact", art.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    ok(&phmat(&args));
    let bytes = std::fs::read(&art).unwrap();
    assert!(artifact::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(artifact::from_bytes(&extra).is_err());
    std::fs::write(&art, &bytes[..bytes.len() / 2]).unwrap();
    let out = phmat(&["instantiate", "--artifact", art.to_str().unwrap(), "--theta", "0.5"]);
    assert!(!out.status.success());
}

#[test]
fn run_appends_csv_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let json = dir.path().join("r.json");
    for method in ["param-h2", "h-aca"] {
        let mut args = vec!["run", "--method", method, "--n-theta", "3", "--repeats", "1", "--out", csv.to_str().unwrap()];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(&["--json", json.to_str().unwrap()]);
        ok(&phmat(&args));
    }
    let rows = read_csv(&csv).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].method, "param-h2");
    assert_eq!(rows[0].online_evals, 0);
    assert!(rows[0].error <= 1e-4);
    assert_eq!(rows[1].method, "h-aca");
    assert!(rows[1].baseline_evals >= rows[1].nf_entries);
    let header = std::fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("Kernel,n,Method,Storage,Offline Time,NF Time,FF Time,Online Time,NF Ratio,FF Ratio,Coupling Ratio,Rank,MVM,Error"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["samples"].as_array().unwrap().len(), 3);
}

#[test]
fn config_file_and_dry_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "# small run\nkernel = mn\nn = 1000\ntheta_box = 0.3:0.9,1:2\n").unwrap();
    let text = ok(&phmat(&["run", "--config", cfg.to_str().unwrap(), "--eps", "1e-6", "--dry-run"]));
    assert!(text.contains("kernel = mn"), "{text}");
    assert!(text.contains("n = 1000"));
    assert!(text.contains("eps = 0.000001") || text.contains("eps = 1e-6"), "{text}");
}

#[test]
fn bad_configs_fail_cleanly() {
    let cases: [&[&str]; 6] = [
        &["run", "--kernel", "gauss", "--dry-run"],
        &["run", "--eps", "2", "--dry-run"],
        &["run", "--n", "0", "--dry-run"],
        &["run", "--kernel", "mn", "--theta-box", "0.25:1", "--dry-run"],
        &["run", "--d", "3", "--lmax", "14", "--dry-run"],
        &["build", "--method", "h-aca", "--n", "64", "--artifact", "/nonexistent/x"],
    ];
    for args in cases {
        let out = phmat(args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{args:?}");
    }
}
