use std::collections::BTreeSet;

use pathlab::harness::{lookup, ExperimentConfig, ALL_OPS, REGISTRY};

const EXPECTED: [&str; 13] = [
    "brownian_marginal",
    "transport_isometry",
    "damped_closed_form",
    "ti_derivative_fd",
    "tibar_right_inverse",
    "flat_ibp",
    "lemma6",
    "prop7_eq5",
    "divergence_eq6_ibp",
    "prop9_pairing",
    "chaos_flat",
    "chaos_conditional_eq4",
    "sde2_residual",
];

#[test]
fn ids_match_the_published_list() {
    let ids: Vec<&str> = REGISTRY.iter().map(|e| e.id()).collect();
    assert_eq!(ids, EXPECTED);
    let unique: BTreeSet<&str> = ids.iter().copied().collect();
    assert_eq!(unique.len(), ids.len());
}

#[test]
fn every_operation_is_exercised() {
    let covered: BTreeSet<&str> = REGISTRY.iter().flat_map(|e| e.exercises().iter().copied()).collect();
    let missing: Vec<&&str> = ALL_OPS.iter().filter(|op| !covered.contains(**op)).collect();
    assert!(missing.is_empty(), "not exercised: {missing:?}");
    let unknown: Vec<&&str> = covered.iter().filter(|op| !ALL_OPS.contains(op)).collect();
    assert!(unknown.is_empty(), "unknown ops listed: {unknown:?}");
}

#[test]
fn defaults_resolve_for_every_experiment() {
    for e in REGISTRY {
        let cfg = ExperimentConfig::defaults(e.id()).unwrap();
        assert_eq!(cfg.experiment, e.id());
        assert_eq!(cfg.manifold, "sphere:2");
        assert!(!e.summary().is_empty());
    }
}

#[test]
fn unknown_id_is_an_error() {
    assert!(lookup("no_such_experiment").is_err());
    assert!(ExperimentConfig::defaults("no_such_experiment").is_err());
}
