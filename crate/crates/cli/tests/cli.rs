use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use marcus_nls_cli::{parse_config, ConfigError};
use sha2::{Digest, Sha256};

const SMALL: &str = r#"
seed = 11

[grid]
n = 64
length = 20.0

[solver]
dt = 0.01
stride = 5
horizon = 0.5

[control]
bins = 2
values = [1.0, 1.0, 3.0, 3.0, 1.0, 1.0, 3.0, 3.0]

[experiment]
eps = [0.2, 0.1]
samples = 20
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marcus-nls"))
        .args(args)
        .env_remove("MARCUS_NLS_SEED")
        .env_remove("MARCUS_NLS_WORKERS")
        .env_remove("MARCUS_NLS_OUT")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn minimal_config_parses() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "min.toml", "seed = 7\n");
    let cfg = parse_config(Path::new(&path)).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.grid.n, 256);
}

#[test]
fn supercritical_sigma_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "bad.toml", "[coefficients]\nsigma = 3.0\n");
    let Err(ConfigError::Invalid(v)) = parse_config(Path::new(&path)) else {
        panic!("sigma = 3 accepted");
    };
    assert_eq!(v[0].field, "coefficients.sigma");
    assert!(v[0].message.contains("sigma < 2/d"));

    let out = run(dir.path(), &["--config", &path, "--out", "o", "check"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma < 2/d"));
    let failure: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/failure.json")).unwrap())
            .unwrap();
    assert_eq!(failure["status"], "invalid_config");
    assert_eq!(failure["violations"][0]["field"], "coefficients.sigma");
}

#[test]
fn mark_outside_unit_ball_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "bad.toml",
        "[measure]\natoms = [[1.5], [-0.5]]\nweights = [1.0, 1.0]\n",
    );
    let Err(ConfigError::Invalid(v)) = parse_config(Path::new(&path)) else {
        panic!("|z| = 1.5 accepted");
    };
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].field, "measure.atoms[0]");
    assert!(v[0].message.contains("mark domain"));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    for out in ["a", "b"] {
        let o = run(dir.path(), &["--config", &cfg, "--out", out, "simulate"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in [
        "trajectory.csv",
        "path.csv",
        "snapshots.bin",
        "summary.json",
    ] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
    let traj = fs::read_to_string(dir.path().join("a/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next().unwrap(), "t,l2_norm,lr_norm,post_jump");
}

#[test]
fn seed_precedence_flag_over_env_over_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let base = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_marcus-nls"));
        cmd.args(["--config", &cfg, "--out", "o"])
            .args(extra)
            .arg("skeleton")
            .current_dir(dir.path());
        cmd.env_remove("MARCUS_NLS_SEED")
            .env_remove("MARCUS_NLS_OUT")
            .env_remove("MARCUS_NLS_WORKERS");
        if let Some(s) = env {
            cmd.env("MARCUS_NLS_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        manifest(&dir.path().join("o"))["seed"].as_u64().unwrap()
    };
    assert_eq!(base(&[], None), 11);
    assert_eq!(base(&[], Some("5")), 5);
    assert_eq!(base(&["--seed", "3"], Some("5")), 3);
}

#[test]
fn convergence_has_ci_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let o = run(
        dir.path(),
        &[
            "--config",
            &cfg,
            "--out",
            "o",
            "--workers",
            "2",
            "convergence",
        ],
    );
    assert_ne!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = fs::read_to_string(dir.path().join("o/convergence.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    for col in ["eps", "p_hat", "ci_low", "ci_high"] {
        assert!(header.contains(&col), "missing column {col}");
    }
    assert_eq!(lines.count(), 2);
    assert_eq!(manifest(&dir.path().join("o"))["workers"], 2);
}

#[test]
fn check_on_defaults_passes_and_manifest_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--out", "o", "check"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("[PASS] conservation"));
    let out = dir.path().join("o");
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    let files = m["files"].as_array().unwrap();
    let mut listed: Vec<String> = files
        .iter()
        .map(|f| f["name"].as_str().unwrap().to_string())
        .collect();
    for f in files {
        let bytes = fs::read(out.join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(
            f["sha256"].as_str().unwrap(),
            hex::encode(Sha256::digest(&bytes))
        );
    }
    let mut on_disk: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    listed.sort();
    on_disk.sort();
    assert_eq!(listed, on_disk);
}

#[test]
fn wongzakai_fixture_checks_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--out", "o", "wongzakai"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = fs::read_to_string(dir.path().join("o/wong_zakai.csv")).unwrap();
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn snapshot_sidecar_describes_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", &format!("{SMALL}\n"));
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "horizon = 0.5",
        "horizon = 0.5\nsnapshot_dtype = \"complex64\"",
    );
    fs::write(&cfg, text).unwrap();
    assert!(
        run(dir.path(), &["--config", &cfg, "--out", "o", "skeleton"])
            .status
            .success()
    );
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/snapshots.json")).unwrap())
            .unwrap();
    assert_eq!(side["dtype"], "complex64");
    let frames = side["shape"][0].as_u64().unwrap() as usize;
    let n = side["shape"][1].as_u64().unwrap() as usize;
    assert_eq!(n, 64);
    assert_eq!(side["times"].as_array().unwrap().len(), frames);
    let bin = fs::read(dir.path().join("o/snapshots.bin")).unwrap();
    assert_eq!(bin.len(), frames * n * 8);
    let re0 = f32::from_le_bytes(bin[..4].try_into().unwrap());
    assert!(re0.is_finite());
}
