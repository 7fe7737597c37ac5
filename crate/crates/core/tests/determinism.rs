use pathlab::harness::{run_experiment, ExperimentConfig, Overrides};

fn csv_bytes(id: &str, o: &Overrides, threads: usize) -> (String, String) {
    let cfg = ExperimentConfig::resolve(id, o).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let report = pool.install(|| run_experiment(&cfg)).unwrap();
    (report.checks_csv().unwrap(), report.estimates_csv().unwrap())
}

#[test]
fn identical_bytes_across_runs_and_thread_counts() {
    let cases = [
        ("brownian_marginal", Overrides { n_paths: Some(64), ..Overrides::default() }),
        ("lemma6", Overrides { n_paths: Some(8), n_resamples: Some(4), dt: Some(1e-2), ..Overrides::default() }),
        ("tibar_right_inverse", Overrides { n_paths: Some(4), n_resamples: Some(8), dt: Some(1e-2), ..Overrides::default() }),
        ("chaos_flat", Overrides { n_paths: Some(400), ..Overrides::default() }),
    ];
    for (id, o) in &cases {
        let first = csv_bytes(id, o, 1);
        assert_eq!(first, csv_bytes(id, o, 1), "{id} rerun");
        assert_eq!(first, csv_bytes(id, o, 4), "{id} with 4 workers");
    }
}

#[test]
fn seed_changes_output() {
    let a = Overrides { n_paths: Some(32), ..Overrides::default() };
    let b = Overrides { seed: Some(2), ..a.clone() };
    assert_ne!(csv_bytes("brownian_marginal", &a, 1), csv_bytes("brownian_marginal", &b, 1));
}
