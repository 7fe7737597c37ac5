//! End-to-end acceptance run: one line per criterion, nonzero exit if any fails.

use std::process::ExitCode;
use std::time::Instant;

use pathlab::harness::{run_experiment, sweep, ExperimentConfig, ExperimentReport, Overrides, SweepParam};

#[derive(Default)]
struct Run {
    results: Vec<(usize, String, bool)>,
    gate_checked: usize,
    gate_violations: usize,
    worst_deviation: f64,
}

impl Run {
    fn report(&mut self, id: &str, o: Overrides) -> Option<ExperimentReport> {
        let cfg = match ExperimentConfig::resolve(id, &o) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("  {id}: {e}");
                return None;
            }
        };
        match run_experiment(&cfg) {
            Ok(r) => {
                self.observe(&r);
                for row in r.rows.iter().filter(|row| !row.pass) {
                    eprintln!("  {id}: {} failed (lhs {:e}, rhs {:e}, z {:.3})", row.check_id, row.lhs, row.rhs, row.z);
                }
                Some(r)
            }
            Err(e) => {
                // a resampler that leaves the gate aborts the run
                if matches!(e, pathlab::harness::HarnessError::Conditional(pathlab::conditional::ConditionalError::ResamplerInvalid { .. })) {
                    self.gate_checked += 1;
                    self.gate_violations += 1;
                }
                eprintln!("  {id}: {e}");
                None
            }
        }
    }

    fn observe(&mut self, r: &ExperimentReport) {
        if let Some(d) = r.max_gate_deviation {
            self.gate_checked += 1;
            self.worst_deviation = self.worst_deviation.max(d);
            if !(d <= r.config.gate()) {
                self.gate_violations += 1;
            }
        }
    }

    fn record(&mut self, k: usize, name: &str, pass: bool, detail: String) {
        println!("criterion {k:>2}  {:<4}  {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((k, name.to_string(), pass));
    }
}

/// Every row passes and the named rows are present.
fn all_pass(r: &Option<ExperimentReport>, required: &[&str]) -> bool {
    r.as_ref().is_some_and(|r| r.passed() && required.iter().all(|id| r.row(id).is_some_and(|row| row.pass)))
}

fn max_abs_z(r: &Option<ExperimentReport>, rows: &[&str]) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| {
        rows.iter().map(|id| r.row(id).map_or(f64::NAN, |row| row.z.abs())).fold(0.0, f64::max)
    })
}

fn value(r: &Option<ExperimentReport>, row: &str) -> f64 {
    r.as_ref().and_then(|r| r.row(row)).map_or(f64::NAN, |row| row.lhs)
}

fn sizes(n: usize) -> Overrides {
    Overrides { n_paths: Some(n), ..Overrides::default() }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut run = Run::default();
    let d = Overrides::default;

    let r = run.report("brownian_marginal", d());
    let ok = all_pass(&r, &["mean_cos_decay"]);
    let (l, rh) = r.as_ref().and_then(|r| r.row("mean_cos_decay")).map_or((f64::NAN, f64::NAN), |x| (x.lhs, x.rhs));
    run.record(1, "Brownian marginal on S^2", ok, format!("mean <x_T,x_0> {l:.5} vs e^-T {rh:.5}"));

    let r = run.report("sde2_residual", d());
    let ok = all_pass(&r, &["max_residual"]);
    run.record(2, "SDE2 residual", ok, format!("max residual {:.3e} over 100 pairs", value(&r, "max_residual")));

    let r = run.report("transport_isometry", d());
    let ok = all_pass(&r, &["gram_defect"]);
    run.record(3, "transport isometry", ok, format!("max Gram defect {:.3e}", value(&r, "gram_defect")));

    let r2 = run.report("damped_closed_form", d());
    let r3 = run.report("damped_closed_form", Overrides { manifold: Some("sphere:3".into()), ..d() });
    let ok = all_pass(&r2, &["damped_vs_closed_form"]) && all_pass(&r3, &["damped_vs_closed_form"]);
    run.record(
        4,
        "damped transport closed form",
        ok,
        format!(
            "sup error {:.3e} (S^2), {:.3e} (S^3)",
            value(&r2, "damped_vs_closed_form"),
            value(&r3, "damped_vs_closed_form")
        ),
    );

    let r = run.report("ti_derivative_fd", d());
    let ok = all_pass(&r, &["fd_relative_error", "chain_rule_fd"]);
    run.record(5, "Ito map derivative vs finite differences", ok, format!("max relative error {:.3e}", value(&r, "fd_relative_error")));

    let r = run.report("tibar_right_inverse", d());
    let ok = all_pass(&r, &["right_inverse_sup_error"]);
    run.record(6, "projection after Y is the identity", ok, format!("sup error {:.3e}", value(&r, "right_inverse_sup_error")));

    let r = run.report("flat_ibp", d());
    let n = r.as_ref().map_or(0, |r| r.rows.iter().filter(|row| row.se_diff > 0.0).count());
    let ok = all_pass(&r, &[]) && n >= 18;
    let z = r.as_ref().map_or(f64::NAN, |r| r.rows.iter().filter(|x| x.se_diff > 0.0).map(|x| x.z.abs()).fold(0.0, f64::max));
    run.record(7, "flat integration by parts", ok, format!("{n} function/direction pairs, max |z| {z:.3}"));

    let families = ["deterministic", "kernel_valued", "path_measurable", "kernel_adapted", "mixed"];
    let r = run.report("lemma6", d());
    let ok = all_pass(&r, &[&families[..], &["kernel_valued_rhs_zero"]].concat());
    run.record(8, "conditional stochastic integral", ok, format!("5 families, max |z| {:.3}", max_abs_z(&r, &families)));

    let fields = ["deterministic_h", "weighted_cylindrical", "path_adapted"];
    let r = run.report("prop7_eq5", d());
    let ok = all_pass(&r, &fields);
    run.record(9, "conditional divergence of flat fields", ok, format!("3 families, max |z| {:.3}", max_abs_z(&r, &fields)));

    let pairs = ["terminal_coordinate", "two_time_product", "weighted_field", "adapted_field"];
    let r = run.report("divergence_eq6_ibp", d());
    let ok = all_pass(&r, &pairs);
    run.record(10, "path-space integration by parts", ok, format!("4 pairs, max |z| {:.3}", max_abs_z(&r, &pairs)));

    let r = run.report("prop9_pairing", d());
    let ok = all_pass(&r, &pairs);
    run.record(11, "weak derivative pairing", ok, format!("4 pairs, max |z| {:.3}", max_abs_z(&r, &pairs)));

    let r = run.report("chaos_conditional_eq4", d());
    let ok = all_pass(&r, &["order1_matches_resampler", "residual_drops_order2"]);
    run.record(
        12,
        "conditional chaos",
        ok,
        format!(
            "order-1 |z| {:.3}, residual drop from order 2 {:.3e}",
            max_abs_z(&r, &["order1_matches_resampler"]),
            value(&r, "residual_drops_order2")
        ),
    );

    // weak bias of the marginal needs SE far below dt; at dt = 1e-3 that is
    // out of reach, so the refinement uses coarser steps and many paths
    let bias = ExperimentConfig::resolve("brownian_marginal", &sizes(2_000_000))
        .ok()
        .and_then(|cfg| sweep(&cfg, SweepParam::Dt, &[0.05, 0.025, 0.0125]).map_err(|e| eprintln!("  dt sweep: {e}")).ok());
    let se = ExperimentConfig::resolve("lemma6", &Overrides { n_resamples: Some(16), ..d() })
        .ok()
        .and_then(|cfg| sweep(&cfg, SweepParam::NPaths, &[250.0, 1000.0, 4000.0]).map_err(|e| eprintln!("  n-paths sweep: {e}")).ok());
    for s in bias.iter().chain(se.iter()) {
        for r in &s.reports {
            run.observe(r);
        }
    }
    let ok = bias.as_ref().is_some_and(|s| s.passed()) && se.as_ref().is_some_and(|s| s.passed());
    run.record(
        13,
        "convergence sweeps",
        ok,
        format!(
            "bias slope {:.3} in [0.7, 1.3], SE slope {:.3} in [-0.6, -0.4]",
            bias.as_ref().map_or(f64::NAN, |s| s.slope),
            se.as_ref().map_or(f64::NAN, |s| s.slope)
        ),
    );

    let ok = run.gate_checked > 0 && run.gate_violations == 0;
    let detail = format!(
        "{} violations over {} resampling runs, worst deviation {:.3e}",
        run.gate_violations, run.gate_checked, run.worst_deviation
    );
    run.record(14, "resampler validity", ok, detail);

    let failed: Vec<usize> = run.results.iter().filter(|r| !r.2).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        run.results.len() - failed.len(),
        run.results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
