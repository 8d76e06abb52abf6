use std::path::Path;
use std::process::{Command, Output};

fn data(name: &str) -> &'static str {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name);
    Box::leak(p.display().to_string().into_boxed_str())
}

fn erw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erw")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_names_the_bad_cookie() {
    let out = erw(&["validate", data("bad_env.json")]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.starts_with("error[environment]"), "{err}");
    assert!(err.contains("prefix[1]"), "{err}");
}

#[test]
fn validate_accepts_good_configs() {
    for c in ["z_zero.json", "bw_diagonal.json", "z_family.json"] {
        let out = erw(&["validate", data(c)]);
        assert_eq!(out.status.code(), Some(0), "{c}: {}", text(&out.stderr));
    }
}

#[test]
fn oracle_prints_symmetric_ruin() {
    let out = erw(&["oracle", "--instance", data("zero_window22.json")]);
    assert_eq!(out.status.code(), Some(0));
    let p: f64 = text(&out.stdout).trim().parse().unwrap();
    assert!((p - 0.5).abs() < 1e-12);
}

#[test]
fn missing_seed_is_a_config_error() {
    let out = erw(&["simulate", data("z_zero.json"), "--replicas", "3", "--horizon", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).starts_with("error[config]"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = erw(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn out_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sim.csv");
    let args = ["simulate", data("z_zero.json"), "--seed", "3", "--replicas", "5", "--horizon", "100"];
    let out = erw(&[&args[..], &["--out", path_str(&csv)]].concat());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let body = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(body.lines().count(), 6);
    assert!(body.starts_with("replica,steps,stop_reason,"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sim.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    let stdout = erw(&args);
    assert_eq!(text(&stdout.stdout), body);
}

#[test]
fn small_sweep_has_a_row_per_grid_point() {
    let out = erw(&[
        "sweep",
        "--family",
        data("z_family.json"),
        "--grid",
        "0.25,0.5,1.5,2.0",
        "--seed",
        "1",
        "--replicas",
        "20",
        "--horizon",
        "2000",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = text(&out.stdout);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("0.25,0.25,1,2000,20,"));
}

#[test]
fn near_critical_classify_is_refused_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("critical.json");
    std::fs::write(
        &cfg,
        r#"{"lattice": {"kind": "zd", "dim": 1}, "kappa": 0.25, "seed": 1,
            "support": [{"probability": 1.0, "prefix": [[0.75, 0.25], [0.75, 0.25]], "tail": [0.5, 0.5]}]}"#,
    )
    .unwrap();
    let base = ["classify", path_str(&cfg), "--replicas", "10", "--horizon", "1000"];
    let out = erw(&base);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).starts_with("error[refused]"), "{}", text(&out.stderr));
    let forced = erw(&[&base[..], &["--force"]].concat());
    assert_eq!(forced.status.code(), Some(0), "{}", text(&forced.stderr));
}

#[test]
fn output_does_not_depend_on_jobs() {
    let run = |jobs: &str| {
        erw(&[
            "simulate",
            data("bw_diagonal.json"),
            "--seed",
            "9",
            "--replicas",
            "40",
            "--horizon",
            "3000",
            "--jobs",
            jobs,
        ])
        .stdout
    };
    assert_eq!(run("1"), run("4"));
}

#[test]
fn martingale_negative_control_fails_the_check() {
    let base = ["martingale-test", data("z_delta15.json"), "--seed", "2", "--replicas", "2000", "--n-list", "100,1000"];
    assert_eq!(erw(&base).status.code(), Some(0));
    let out = erw(&[&base[..], &["--negative-control"]].concat());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).starts_with("check failed"));
}
