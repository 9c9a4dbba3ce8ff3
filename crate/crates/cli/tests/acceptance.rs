//! Acceptance suite: one line per criterion, non-zero exit when any fails.
//! Runs as a plain binary (`harness = false`) so the lines are always shown.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use magflow::flow::{find_periodic_orbit, PeriodicSearch};
use magflow::frame::{magnetic_curvature, transported_frame};
use magflow::{ChartMetric, ClosedTwoForm, MagneticSystem, PhaseState};
use magflow_cli::scenario::{CertificateCheck, ChartSpec, Experiment, FormSpec};
use magflow_cli::{bundled, run_scenario, Outcome, RunOptions, Scenario, Status};
use nalgebra::DMatrix;
use serde_json::Value;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct Runs {
    outcomes: BTreeMap<String, (Outcome, Duration)>,
}

impl Runs {
    fn all() -> Runs {
        let mut outcomes = BTreeMap::new();
        for b in bundled() {
            let t = Instant::now();
            let o = run_scenario(&b.scenario(), &RunOptions::default()).expect("bundled scenarios validate");
            outcomes.insert(b.name.to_string(), (o, t.elapsed()));
        }
        Runs { outcomes }
    }

    fn get(&self, name: &str) -> &Outcome {
        &self.outcomes[name].0
    }

    fn elapsed(&self, name: &str) -> Duration {
        self.outcomes[name].1
    }
}

fn value(o: &Outcome, check: &str) -> f64 {
    o.report.check(check).map_or(f64::NAN, |c| c.value)
}

fn passed(o: &Outcome, check: &str) -> bool {
    o.report.check(check).is_some_and(|c| c.pass)
}

/// The `algebra_ledgers` scenario restricted to the checks matching `keep`.
fn algebra_subset(keep: fn(&CertificateCheck) -> bool) -> (Outcome, Duration) {
    let mut sc = bundled().into_iter().find(|b| b.name == "algebra_ledgers").unwrap().scenario();
    if let Experiment::Certificate { checks } = &mut sc.experiment {
        checks.retain(keep);
    }
    let t = Instant::now();
    let o = run_scenario(&sc, &RunOptions::default()).unwrap();
    (o, t.elapsed())
}

fn certificate_section<'a>(o: &'a Outcome, name: &str) -> Vec<&'a Value> {
    o.report.result["certificates"]
        .as_array()
        .map(|a| a.iter().filter(|s| s["check"] == name).collect())
        .unwrap_or_default()
}

fn criterion_1() -> Verdict {
    let (o, t) = algebra_subset(|c| matches!(c, CertificateCheck::BracketLedger { .. }));
    let ledgers = &certificate_section(&o, "bracket_ledger")[0]["ledgers"];
    let checked: u64 = ledgers.as_array().unwrap().iter().map(|l| l["identities_checked"].as_u64().unwrap()).sum();
    let ns: Vec<u64> = ledgers.as_array().unwrap().iter().map(|l| l["n"].as_u64().unwrap()).collect();
    let ok = o.report.status == Status::Ok && ns == vec![1, 2, 3, 4, 5, 6] && t < Duration::from_secs(1);
    verdict(ok, format!("n = 1..6, {checked} exact identities, 0 failures required, {:.3} s (< 1 s)", t.as_secs_f64()))
}

fn criterion_2() -> Verdict {
    let (o, t) = algebra_subset(|c| matches!(c, CertificateCheck::Dimensions { .. }));
    let samples = certificate_section(&o, "dimensions")[0]["samples"].as_array().unwrap().clone();
    let mut ok = samples.len() == 30 && t < Duration::from_secs(5);
    for s in &samples {
        let n = s["n"].as_u64().unwrap();
        let d = &s["dims"];
        let get = |k: &str| d[k]["dim"].as_u64().unwrap();
        ok &= get("s1") == n * (n + 1) && get("s2") == n * (n + 1) / 2 && get("s3") >= n * (n - 1) / 2 && get("total") == n * (2 * n + 1);
    }
    verdict(ok, format!("{} random K(0), n = 1..6, S1/S2/S3/total against n(n+1), n(n+1)/2, >= n(n-1)/2, n(2n+1), {:.3} s (< 5 s)", samples.len(), t.as_secs_f64()))
}

fn criterion_3() -> Verdict {
    let (o, _) = algebra_subset(|c| matches!(c, CertificateCheck::Containment { .. }));
    let worst = (1..=4)
        .flat_map(|n| [value(&o, &format!("containment_b1_n{n}")), value(&o, &format!("containment_b2_n{n}"))])
        .fold(0.0f64, f64::max);
    verdict(o.report.status == Status::Ok && worst <= 1e-10, format!("max projection residual {worst:.2e} (<= 1e-10), n = 1..4"))
}

fn criterion_4() -> Verdict {
    let (o, _) = algebra_subset(|c| matches!(c, CertificateCheck::Symplecticity { .. }));
    let curves = certificate_section(&o, "symplecticity")[0]["curves"].as_array().map_or(0, |a| a.len());
    let def = value(&o, "symplectic_defect");
    let rec = value(&o, "spectrum_reciprocity");
    verdict(
        curves == 20 && def <= 1e-8 && rec <= 1e-7,
        format!("{curves} curves, horizon 5: defect {def:.2e} (<= 1e-8), reciprocity {rec:.2e} (<= 1e-7)"),
    )
}

fn criterion_5(runs: &Runs) -> Verdict {
    let names = ["flat_geodesic", "larmor_monodromy", "perturbed_field_oracle"];
    let errs: Vec<f64> = names.iter().map(|n| value(runs.get(n), "oracle_relative_error")).collect();
    let t: f64 = names.iter().map(|n| runs.elapsed(n).as_secs_f64()).sum();
    verdict(
        errs.iter().all(|e| *e <= 1e-4) && t < 30.0,
        format!("relative errors {:.2e} / {:.2e} / {:.2e} (<= 1e-4), {t:.2} s (< 30 s)", errs[0], errs[1], errs[2]),
    )
}

/// Accumulated turning angle of `gamma'` in the plane over one period.
fn larmor_turning() -> (f64, f64, f64) {
    let sys = MagneticSystem::new(ChartMetric::flat_torus(2), ClosedTwoForm::constant_planar(1.0)).unwrap();
    let guess = PhaseState::from_slices(&[0.5, 0.5], &[1.0, 0.0]);
    let orbit = find_periodic_orbit(&sys, &guess, std::f64::consts::TAU, 2e-3, &PeriodicSearch::default()).unwrap();
    let frame = transported_frame(&sys, &orbit).unwrap();
    let curve = magnetic_curvature(&sys, &orbit, &frame).unwrap();
    let mut angle = 0.0;
    for w in frame.frame.windows(2) {
        let (a, b) = (w[0].column(0), w[1].column(0));
        angle += (a[0] * b[1] - a[1] * b[0]).atan2(a.dot(&b));
    }
    let k_err = curve.k.iter().map(|k| (k - DMatrix::identity(1, 1)).amax()).fold(0.0, f64::max);
    (orbit.period.unwrap(), angle.abs(), k_err)
}

fn criterion_6(runs: &Runs) -> Verdict {
    let o = runs.get("larmor_monodromy");
    let dev = value(o, "monodromy_expected");
    let label = passed(o, "classification_label") && passed(o, "classification_order");
    let disc = o.report.result["discrepancies"].as_array().map_or(0, |a| a.len());
    let best = &o.report.result["assemblies"][0];
    let (period, turn, k_err) = larmor_turning();
    let tau = std::f64::consts::TAU;
    let ok = dev <= 1e-5 && label && disc > 0 && k_err <= 1e-8 && (period - tau).abs() <= 1e-8 && (turn - tau).abs() <= 1e-6 && best["assembly"] != "consolidated";
    let consolidated = o.report.result["discrepancies"][0]["max_abs_difference"].as_f64().unwrap_or(f64::NAN);
    verdict(
        ok,
        format!(
            "|P - I| = {dev:.2e} (<= 1e-5), degenerate of order 1: {label}, |K - b^2| = {k_err:.1e}, period {period:.9}, turning {turn:.9}, consolidated differs by {consolidated:.3} ({disc} discrepancy rows)"
        ),
    )
}

fn criterion_7(runs: &Runs) -> Verdict {
    let o = runs.get("curvature_shift");
    let families = o.report.result["shift_check"]["families"].as_array().map_or(0, |a| a.len());
    let k = o.report.system["injectivity"]["k"].as_f64().unwrap_or(f64::NAN);
    let tau = o.report.result["orbit"]["duration"].as_f64().unwrap_or(f64::NAN);
    let shift = value(o, "curvature_shift");
    let dev = value(o, "perturbed_orbit_deviation");
    let drift = value(o, "perturbed_energy_drift");
    verdict(
        families == 10 && k == 0.25 && tau < k && shift <= 1e-5 && dev <= 1e-7 && drift <= 1e-8,
        format!("{families} families, tau = {tau} < K = {k}: shift {shift:.2e} (<= 1e-5), orbit {dev:.2e} (<= 1e-7), drift {drift:.2e} (<= 1e-8)"),
    )
}

fn criterion_8(runs: &Runs) -> Verdict {
    let o = runs.get("franks_demo");
    let scan = &o.report.result["scans"][0];
    let rate = scan["success_rate"].as_f64().unwrap_or(0.0);
    let residual = scan["max_residual"].as_f64().unwrap_or(f64::NAN);
    let samples = scan["samples"].as_u64().unwrap_or(0);
    let eps = scan["eps"].as_f64().unwrap_or(f64::NAN);
    let slope = o.report.result["norm_scaling"]["slope"].as_f64().unwrap_or(f64::NAN);
    let radii = o.report.result["norm_scaling"]["eps"].clone();
    let t = runs.elapsed("franks_demo").as_secs_f64();
    let ok = samples == 100 && eps == 1e-3 && rate == 1.0 && residual <= 1e-6 && (0.4..=1.1).contains(&slope) && radii == serde_json::json!([1e-4, 1e-3, 1e-2]) && t < 120.0;
    verdict(ok, format!("N = {samples} at eps = {eps:e}: success {:.0}%, max residual {residual:.2e} (<= 1e-6), slope {slope:.3} in [0.4, 1.1], {t:.2} s (< 120 s)", rate * 100.0))
}

fn criterion_9(runs: &Runs) -> Verdict {
    let o = runs.get("variational_basis");
    let rank = value(o, "basis_rank");
    let lambda = o.report.result["pulse"]["lambda"].as_f64().unwrap_or(f64::NAN);
    let err = value(o, "duhamel_vs_flow");
    verdict(rank == 2.0 && lambda == 0.05 && err <= 1e-4, format!("rank {rank} = 2n at lambda = {lambda}, Duhamel vs flow {err:.2e} (<= 1e-4)"))
}

/// `min(1 / (|Omega| + 1)^2, inj / (2c))` from the preset parameters alone.
fn expected_k(sc: &Scenario) -> Option<f64> {
    let inj = match sc.chart {
        ChartSpec::FlatTorus { .. } => 0.5,
        ChartSpec::RoundSphere => std::f64::consts::PI,
        ChartSpec::Expressions { .. } => return None,
    };
    let w = match &sc.omega {
        FormSpec::Zero => 0.0,
        FormSpec::ConstantPlanar { b } | FormSpec::SphereArea { b } => b.abs(),
        FormSpec::ConstantMatrix { matrix } => {
            let m = matrix.len();
            DMatrix::from_fn(m, m, |i, j| matrix[i][j]).singular_values().max()
        }
        _ => return None,
    };
    Some((1.0 / (w + 1.0).powi(2)).min(inj / (2.0 * sc.c)))
}

fn criterion_10(runs: &Runs) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for b in bundled() {
        let sc = b.scenario();
        let o = runs.get(b.name);
        let Some(want) = expected_k(&sc) else { continue };
        let Some(got) = o.report.system["injectivity"]["k"].as_f64() else { continue };
        ok &= got == want;
        if let Experiment::Integrate { .. } = sc.experiment {
            let clean = passed(o, "self_intersections_below_k");
            ok &= clean;
            parts.push(format!("{}: K = {got} (no crossing on [0, K): {clean})", b.name));
        } else {
            parts.push(format!("{}: K = {got}", b.name));
        }
    }
    let whole = !runs.get("larmor_circle").report.result["self_intersection_whole_orbit"].is_null();
    verdict(ok && whole, format!("{}; full Larmor circle self-crosses: {whole}", parts.join(", ")))
}

fn criterion_11(runs: &Runs) -> Verdict {
    let mut diffs = Vec::new();
    for b in bundled() {
        let again = run_scenario(&b.scenario(), &RunOptions::default()).unwrap();
        let first = runs.get(b.name);
        if again.report.to_json() != first.report.to_json() || again.data != first.data || again.extras != first.extras {
            diffs.push(b.name);
        }
    }
    verdict(diffs.is_empty(), format!("{} scenarios rerun, differing: {diffs:?}", bundled().len()))
}

fn main() {
    let start = Instant::now();
    let runs = Runs::all();
    let smoke: Vec<&String> = runs.outcomes.iter().filter(|(_, (o, _))| o.exit_code() != 0).map(|(n, _)| n).collect();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict>)> = vec![
        ("bracket ledger (exact)", Box::new(criterion_1)),
        ("dimension ledger", Box::new(criterion_2)),
        ("containment conditions", Box::new(criterion_3)),
        ("symplecticity", Box::new(criterion_4)),
        ("oracle agreement", Box::new(|| criterion_5(&runs))),
        ("Larmor degeneracy", Box::new(|| criterion_6(&runs))),
        ("curvature-shift identity", Box::new(|| criterion_7(&runs))),
        ("Franks demonstration", Box::new(|| criterion_8(&runs))),
        ("variational basis", Box::new(|| criterion_9(&runs))),
        ("magnetic injectivity radius", Box::new(|| criterion_10(&runs))),
        ("determinism", Box::new(|| criterion_11(&runs))),
    ];
    let mut failures = 0;
    for (i, (title, f)) in criteria.iter().enumerate() {
        let v = f();
        if !v.pass {
            failures += 1;
        }
        println!("criterion {:>2} {} {title}: {}", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("bundled scenarios with non-zero exit: {smoke:?}");
    println!("acceptance: {} of {} criteria passed in {:.1} s", criteria.len() - failures, criteria.len(), start.elapsed().as_secs_f64());
    if failures > 0 || !smoke.is_empty() {
        std::process::exit(1);
    }
}
