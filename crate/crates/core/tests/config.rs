use std::process::Command;

use pathlab::harness::{run_experiment, sweep, ExperimentConfig, HarnessError, Overrides, SweepParam};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pathlab"))
}

#[test]
fn zero_paths_is_a_config_error() {
    let o = Overrides { n_paths: Some(0), ..Overrides::default() };
    assert!(matches!(ExperimentConfig::resolve("lemma6", &o), Err(HarnessError::Config(_))));
    let mut cfg = ExperimentConfig::defaults("lemma6").unwrap();
    cfg.n_paths = 0;
    assert!(matches!(run_experiment(&cfg), Err(HarnessError::Config(_))));
}

#[test]
fn other_invalid_values_are_rejected() {
    for o in [
        Overrides { dt: Some(-1e-3), ..Overrides::default() },
        Overrides { dt: Some(2.0), ..Overrides::default() },
        Overrides { horizon: Some(0.0), ..Overrides::default() },
        Overrides { n_resamples: Some(1), ..Overrides::default() },
        Overrides { manifold: Some("torus:2".into()), ..Overrides::default() },
        Overrides { manifold: Some("sphere:9".into()), ..Overrides::default() },
        Overrides { scheme: Some("rk4".into()), ..Overrides::default() },
        Overrides { gate_factor: Some(0.0), ..Overrides::default() },
    ] {
        assert!(ExperimentConfig::resolve("sde2_residual", &o).is_err(), "{o:?}");
    }
}

#[test]
fn toml_keys_mirror_flags() {
    let o = Overrides::from_toml("n-paths = 7\ndt = 0.01\nmanifold = \"sphere:3\"\ndump-paths = true\n").unwrap();
    assert_eq!(o.n_paths, Some(7));
    assert_eq!(o.dt, Some(0.01));
    assert_eq!(o.manifold.as_deref(), Some("sphere:3"));
    assert_eq!(o.dump_paths, Some(true));
    assert!(Overrides::from_toml("n_paths = 7").is_err());
    assert!(Overrides::from_toml("paths = 7").is_err());
}

#[test]
fn flags_override_file_values() {
    let file = Overrides::from_toml("dt = 0.01\nseed = 9\n").unwrap();
    let cli = Overrides { dt: Some(0.02), ..Overrides::default() };
    let cfg = ExperimentConfig::resolve("sde2_residual", &file.merge(cli)).unwrap();
    assert_eq!(cfg.dt, 0.02);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.n_paths, 100);
}

#[test]
fn sweep_needs_two_values() {
    let cfg = ExperimentConfig::defaults("sde2_residual").unwrap();
    assert!(matches!(sweep(&cfg, SweepParam::Dt, &[]), Err(HarnessError::Sweep(_))));
    assert!(matches!(sweep(&cfg, SweepParam::Dt, &[1e-3]), Err(HarnessError::Sweep(_))));
    assert!(sweep(&cfg, SweepParam::NPaths, &[10.0, 2.5]).is_err());
    assert!("temperature".parse::<SweepParam>().is_err());
}

#[test]
fn reports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let o = Overrides { out: Some(dir.path().to_path_buf()), dump_paths: Some(true), n_paths: Some(20), ..Overrides::default() };
    let cfg = ExperimentConfig::resolve("brownian_marginal", &o).unwrap();
    let report = run_experiment(&cfg).unwrap();
    let checks = std::fs::read_to_string(dir.path().join("brownian_marginal_checks.csv")).unwrap();
    assert_eq!(
        checks.lines().next().unwrap(),
        "check_id,lhs,rhs,se_lhs,se_rhs,z,n_paths,n_resamples,dt,seed,pass"
    );
    assert_eq!(checks.lines().count(), report.rows.len() + 1);
    assert!(dir.path().join("brownian_marginal_estimates.csv").exists());
    assert!(dir.path().join("brownian_marginal_summary.txt").exists());
    let paths = std::fs::read_to_string(dir.path().join("brownian_marginal_paths.csv")).unwrap();
    assert!(paths.starts_with("path,step,t,x0,x1,x2"));
}

#[test]
fn cli_exit_codes() {
    let list = bin().arg("list").output().unwrap();
    assert!(list.status.success());
    assert_eq!(String::from_utf8(list.stdout).unwrap().lines().count(), 13);

    let ok = bin().args(["run", "sde2_residual", "--n-paths", "10"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8(ok.stdout).unwrap().contains("PASS"));

    let bad = bin().args(["run", "sde2_residual", "--n-paths", "0"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let unknown = bin().args(["run", "nothing"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));

    // a gate far below round-off makes every resample fail validation
    let tight = bin()
        .args(["run", "tibar_right_inverse", "--n-paths", "2", "--n-resamples", "4", "--gate-factor", "1e-12"])
        .output()
        .unwrap();
    assert_ne!(tight.status.code(), Some(0));
}

#[test]
fn cli_reads_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "experiment = \"sde2_residual\"\nn-paths = 5\nseed = 3\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&file).args(["--seed", "4"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("paths 5"), "{text}");
    assert!(text.contains("seed 4"), "{text}");

    std::fs::write(&file, "experiment = \"sde2_residual\"\nwarp = 9\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&file).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_sweep_rejects_single_value() {
    let out = bin().args(["sweep", "sde2_residual", "--param", "dt", "--values", "0.01"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
