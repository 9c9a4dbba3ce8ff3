//! Experiment drivers. Each one fills a [`Partial`] as it goes, so that a
//! numerical failure midway still leaves the finished parts in the report.

use magflow::flow::{find_periodic_orbit, find_self_intersection, integrate, magnetic_injectivity_radius, mark_periodic, PeriodicSearch};
use magflow::frame::{fermi_chart, jacobi_initial_data, magnetic_curvature, reduced_jacobi_residual, transported_frame};
use magflow::geometry::c0_norm;
use magflow::linalg::symplectic_defect;
use magflow::linmap::{adjudicate_assemblies, classify_default, fd_jacobi_field, fd_linearization, linearized_poincare, propagate, relative_error, spectrum_symmetry};
use magflow::perturb::{
    basis_variation_certificate, build_perturbation, curvature_shift, default_tube_radius, franks_ball_scan, franks_solve, isolation_distance,
    norm_scaling, orbit_deviation, reintegrate, sphere_target, variational_response, variational_response_fd, BumpProfile, ControlFamily,
    ScalarControl,
};
use magflow::sympctl::{bracket_ledger, end_point, first_order_certificate, rows_f64, second_order_certificate};
use magflow::{ControlVector, CurvatureCurve, FermiFrame, LinearSystemCurve, MagneticSystem, OrbitSegment, SymplecticMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::scenario::{CertificateCheck, Closure, Experiment, ExpectedMonodromy, Scenario, ShiftCheck, Tolerances};

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Check {
    pub name: String,
    /// `le`, `ge` or `eq`.
    pub comparison: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// What an experiment has produced so far.
#[derive(Debug, Default)]
pub struct Partial {
    pub checks: Vec<Check>,
    pub result: Map<String, Value>,
    pub data: String,
    /// Extra files for `--dump-intermediate`, as `(suffix, contents)`.
    pub extras: Vec<(String, String)>,
}

impl Partial {
    fn le(&mut self, name: impl Into<String>, value: f64, threshold: f64) {
        self.checks.push(Check { name: name.into(), comparison: "le", value, threshold, pass: value <= threshold, note: None });
    }

    fn ge(&mut self, name: impl Into<String>, value: f64, threshold: f64) {
        self.checks.push(Check { name: name.into(), comparison: "ge", value, threshold, pass: value >= threshold, note: None });
    }

    fn eq(&mut self, name: impl Into<String>, value: f64, expected: f64, note: Option<String>) {
        self.checks.push(Check { name: name.into(), comparison: "eq", value, threshold: expected, pass: value == expected, note });
    }

    fn put<T: Serialize>(&mut self, key: &str, v: T) {
        self.result.insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }
}

pub struct Context<'a> {
    pub scenario: &'a Scenario,
    pub tol: Tolerances,
    pub seed: Option<u64>,
    pub dump: bool,
}

type Run = magflow::Result<()>;

pub fn run(ctx: &Context, sys: Option<&MagneticSystem>, out: &mut Partial) -> Run {
    match &ctx.scenario.experiment {
        Experiment::Integrate { injectivity_samples } => integrate_experiment(ctx, sys.expect("validated"), *injectivity_samples, out),
        Experiment::Curvature { assembly, shift_check, jacobi_check } => {
            curvature_experiment(ctx, sys.expect("validated"), *assembly, shift_check.as_ref(), *jacobi_check, out)
        }
        Experiment::Poincare { fd_step, expect } => poincare_experiment(ctx, sys.expect("validated"), *fd_step, expect.as_ref(), out),
        Experiment::Certificate { checks } => certificate_experiment(ctx, sys, checks, out),
        Experiment::FranksScan { eps, samples, slope_radii, slope_samples, slope_range, options } => {
            let scan = ScanSpec { eps, samples: *samples, slope_radii, slope_samples: *slope_samples, slope_range: *slope_range };
            franks_experiment(ctx, sys.expect("validated"), &scan, options, out)
        }
        Experiment::Variational { lambda, center, delta, fd_step } => {
            variational_experiment(ctx, sys.expect("validated"), *lambda, *center, *delta, *fd_step, out)
        }
    }
}

fn build_orbit(ctx: &Context, sys: &MagneticSystem) -> magflow::Result<OrbitSegment> {
    let spec = ctx.scenario.orbit.as_ref().expect("validated");
    let start = sys.state_on_energy(DVector::from_column_slice(&spec.x), DVector::from_column_slice(&spec.direction), ctx.scenario.c)?;
    match spec.closure {
        Closure::None => integrate(sys, &start, spec.duration, spec.step),
        Closure::Mark => mark_periodic(sys, integrate(sys, &start, spec.duration, spec.step)?, ctx.tol.closure),
        Closure::Search => find_periodic_orbit(sys, &start, spec.duration, spec.step, &PeriodicSearch::default()),
    }
}

struct Pipeline {
    orbit: OrbitSegment,
    frame: FermiFrame,
    curve: CurvatureCurve,
}

fn pipeline(ctx: &Context, sys: &MagneticSystem, out: &mut Partial) -> magflow::Result<Pipeline> {
    let orbit = build_orbit(ctx, sys)?;
    out.put("orbit", orbit_summary(&orbit));
    out.le("energy_drift", orbit.energy_drift, ctx.tol.energy_drift);
    if ctx.dump {
        out.extras.push(("orbit.csv".into(), orbit.to_csv(sys)));
    }
    let frame = transported_frame(sys, &orbit)?;
    let curve = magnetic_curvature(sys, &orbit, &frame)?;
    if ctx.dump {
        out.extras.push(("curvature.csv".into(), curve.to_csv()));
    }
    Ok(Pipeline { orbit, frame, curve })
}

fn orbit_summary(orbit: &OrbitSegment) -> Value {
    json!({
        "start_time": orbit.start_time(),
        "duration": orbit.duration(),
        "steps": orbit.steps(),
        "step": orbit.step,
        "energy": orbit.energy,
        "energy_drift": orbit.energy_drift,
        "period": orbit.period,
        "closure": orbit.closure,
        "start": orbit.first(),
        "end": orbit.last(),
    })
}

/// `K(c, Omega)` together with its two competitors, for the report.
pub fn injectivity_summary(sys: &MagneticSystem, c: f64, samples: usize) -> magflow::Result<Value> {
    let w = c0_norm(&sys.chart, &sys.form, samples)?;
    let k = magnetic_injectivity_radius(sys, c, samples)?;
    Ok(json!({
        "omega_c0": w,
        "chart_injectivity_radius": sys.chart.injectivity_radius(),
        "field_bound": 1.0 / (w + 1.0).powi(2),
        "chart_bound": sys.chart.injectivity_radius() / (2.0 * c),
        "k": k,
    }))
}

fn integrate_experiment(ctx: &Context, sys: &MagneticSystem, samples: usize, out: &mut Partial) -> Run {
    let orbit = build_orbit(ctx, sys)?;
    out.put("orbit", orbit_summary(&orbit));
    out.data = orbit.to_csv(sys);
    out.le("energy_drift", orbit.energy_drift, ctx.tol.energy_drift);
    if let Some(c) = orbit.closure {
        out.le("closure", c, ctx.tol.closure);
    }
    let k = magnetic_injectivity_radius(sys, ctx.scenario.c, samples)?;
    out.put("injectivity", injectivity_summary(sys, ctx.scenario.c, samples)?);
    // samples with t - t0 < K
    let last = ((k / orbit.step).ceil() as usize).saturating_sub(1).min(orbit.steps());
    if last >= 2 {
        let head = orbit.slice(0, last)?;
        let hit = find_self_intersection(sys, &head, ctx.tol.self_intersection, 1);
        out.put("self_intersection_below_k", json!({ "window": head.duration(), "hit": hit }));
        out.eq("self_intersections_below_k", hit.is_some() as u8 as f64, 0.0, None);
    }
    let whole = find_self_intersection(sys, &orbit, ctx.tol.self_intersection, 1);
    out.put("self_intersection_whole_orbit", whole);
    Ok(())
}

fn curvature_experiment(
    ctx: &Context,
    sys: &MagneticSystem,
    assembly: Option<magflow::Assembly>,
    shift: Option<&ShiftCheck>,
    jacobi: bool,
    out: &mut Partial,
) -> Run {
    let Pipeline { orbit, frame, curve } = pipeline(ctx, sys, out)?;
    let curve = match assembly {
        Some(a) => curve.with_assembly(a),
        None => curve,
    };
    let (orth, mom) = frame.defects(&sys.chart);
    out.put("assembly", curve.assembly);
    out.put("frame_defects", json!({ "orthonormality": orth, "transport": mom }));
    out.put("discrepancies", curve.discrepancies());
    out.put("k_start", rows_f64(&curve.k[0]));
    out.put("k_end", rows_f64(&curve.k[curve.len() - 1]));
    out.le("k_symmetry", curve.asymmetry(), ctx.tol.symmetry);
    out.data = curve.to_csv();
    if jacobi {
        let n = curve.n();
        let mut rows = Vec::new();
        for col in 0..2 * n {
            let mut f = DVector::zeros(n);
            let mut fp = DVector::zeros(n);
            if col < n {
                f[col] = 1.0;
            } else {
                fp[col - n] = 1.0;
            }
            let (j0, jp0) = jacobi_initial_data(&frame, &curve, 0, &f, &fp);
            let field = fd_jacobi_field(sys, &orbit, &j0, &jp0, 1e-4)?;
            let r = reduced_jacobi_residual(&sys.chart, &frame, &curve, &field)?;
            out.le(format!("jacobi_equation_{col}"), r.equation.max(r.slaving), ctx.tol.jacobi);
            out.le(format!("jacobi_momentum_{col}"), r.momentum_drift, ctx.tol.momentum);
            rows.push(r);
        }
        out.put("jacobi", rows);
    }
    if let Some(sc) = shift {
        shift_identity(ctx, sys, &orbit, &frame, &curve, sc, out)?;
    }
    Ok(())
}

fn shift_identity(
    ctx: &Context,
    sys: &MagneticSystem,
    orbit: &OrbitSegment,
    frame: &FermiFrame,
    curve: &CurvatureCurve,
    sc: &ShiftCheck,
    out: &mut Partial,
) -> Run {
    let k = magnetic_injectivity_radius(sys, ctx.scenario.c, 64)?;
    out.le("duration_below_k", orbit.duration(), k);
    let delta = default_tube_radius(sys, orbit)?;
    let chart = fermi_chart(sys, orbit, frame, delta)?;
    let n = curve.n();
    let channels = n * (n + 1) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed.expect("validated"));
    let mut rows = Vec::with_capacity(sc.families);
    let (mut w_shift, mut w_dev, mut w_drift) = (0.0f64, 0.0f64, 0.0f64);
    for fam_idx in 0..sc.families {
        let coeffs = DMatrix::from_fn(channels, sc.modes, |_, _| sc.scale * rng.gen_range(-1.0..1.0));
        let fam = ControlFamily::new(ControlVector::from_coefficients(n, sc.support, coeffs)?);
        let pert = build_perturbation(&fam, &chart, delta, BumpProfile::Exp)?;
        let (psys, porbit) = reintegrate(sys, orbit, &pert.form())?;
        let dev = orbit_deviation(sys, orbit, &porbit);
        let pframe = transported_frame(&psys, &porbit)?;
        let pcurve = magnetic_curvature(&psys, &porbit, &pframe)?;
        let mut worst: f64 = 0.0;
        for (i, t) in curve.times.iter().enumerate() {
            let expect = &curve.k[i] - curvature_shift(&fam, orbit.energy, *t);
            worst = worst.max((&pcurve.k[i] - expect).amax());
        }
        w_shift = w_shift.max(worst);
        w_dev = w_dev.max(dev);
        w_drift = w_drift.max(porbit.energy_drift);
        rows.push(json!({
            "family": fam_idx,
            "coefficients": rows_f64(fam.controls().coefficients()),
            "shift_error": worst,
            "orbit_deviation": dev,
            "energy_drift": porbit.energy_drift,
            "axis_residual": pert.axis_residual(50),
            "form_norms": pert.norms(100),
        }));
    }
    out.put("shift_check", json!({ "delta": delta, "families": rows }));
    out.le("curvature_shift", w_shift, ctx.tol.curvature_shift);
    out.le("perturbed_orbit_deviation", w_dev, ctx.tol.orbit_deviation);
    out.le("perturbed_energy_drift", w_drift, ctx.tol.energy_drift);
    Ok(())
}

fn poincare_experiment(ctx: &Context, sys: &MagneticSystem, fd_step: Option<f64>, expect: Option<&ExpectedMonodromy>, out: &mut Partial) -> Run {
    let Pipeline { orbit, frame, curve } = pipeline(ctx, sys, out)?;
    let lin = LinearSystemCurve::from_curvature(&curve);
    let p = linearized_poincare(&orbit, &lin)?;
    out.put("linearized", rows_f64(p.entries()));
    out.put("k_start", rows_f64(&curve.k[0]));
    out.put("k_range", curve.k.iter().flat_map(|k| k.iter().cloned()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v))));
    let cls = classify_default(&p);
    out.put("classification", &cls);
    out.put("discrepancies", curve.discrepancies());
    out.le("linearized_symplectic_defect", p.defect(), ctx.tol.symplectic);
    let fd = fd_linearization(sys, &orbit, &frame, &curve, fd_step)?;
    out.put("oracle", json!({ "matrix": rows_f64(&fd.matrix), "h": fd.h, "noise": fd.noise, "warning": fd.warning }));
    let err = relative_error(p.entries(), &fd.matrix);
    out.le("oracle_relative_error", err, ctx.tol.oracle);
    let verdicts = adjudicate_assemblies(&orbit, &curve, &fd.matrix)?;
    out.put("assemblies", &verdicts);
    let m = p.entries();
    let mut csv = String::from("row,col,linearized,oracle\n");
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            csv.push_str(&format!("{r},{c},{:.12e},{:.12e}\n", m[(r, c)], fd.matrix[(r, c)]));
        }
    }
    out.data = csv;
    if let Some(e) = expect {
        if let Some(rows) = &e.matrix {
            let want = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| rows.get(r).and_then(|x| x.get(c)).copied().unwrap_or(f64::NAN));
            out.le("monodromy_expected", (m - want).amax(), ctx.tol.monodromy);
        }
        if let Some(label) = &e.label {
            let ok = cls.label.name() == label;
            out.eq("classification_label", ok as u8 as f64, 1.0, Some(format!("expected {label}, got {}", cls.label.name())));
        }
        if let Some(order) = e.order {
            out.eq("classification_order", cls.order.map_or(0.0, |o| o as f64), order as f64, None);
        }
        if let Some(a) = e.best_assembly {
            let ok = verdicts.first().map(|v| v.assembly) == Some(a);
            out.eq("best_assembly", ok as u8 as f64, 1.0, Some(format!("expected {}, got {}", a.name(), verdicts[0].assembly.name())));
        }
    }
    Ok(())
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

fn certificate_experiment(ctx: &Context, sys: Option<&MagneticSystem>, checks: &[CertificateCheck], out: &mut Partial) -> Run {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed.unwrap_or(0));
    let mut sections = Vec::new();
    for check in checks {
        match check {
            CertificateCheck::BracketLedger { n_max } => {
                let mut rows = Vec::new();
                for n in 1..=*n_max {
                    let l = bracket_ledger(n);
                    out.eq(format!("bracket_ledger_n{n}_failures"), l.failures.len() as f64, 0.0, l.failures.first().cloned());
                    rows.push(l);
                }
                sections.push(json!({ "check": "bracket_ledger", "ledgers": rows }));
            }
            CertificateCheck::Dimensions { n_max, samples } | CertificateCheck::Containment { n_max, samples } => {
                let dims = matches!(check, CertificateCheck::Dimensions { .. });
                let mut rows = Vec::new();
                for n in 1..=*n_max {
                    let mut worst = (0.0f64, 0.0f64);
                    let mut all_dims = true;
                    for s in 0..*samples {
                        let curve = LinearSystemCurve::constant(random_symmetric(n, &mut rng), 1.0, 0.01)?;
                        let r = second_order_certificate(&curve, 0.0)?;
                        worst = (worst.0.max(r.containment_b1), worst.1.max(r.containment_b2));
                        all_dims &= r.pass_dims;
                        rows.push(json!({ "n": n, "sample": s, "dims": r.dims, "expected": r.expected,
                            "containment_b1": r.containment_b1, "containment_b2": r.containment_b2,
                            "orthogonality": r.orthogonality, "products_vanish": r.products_vanish }));
                    }
                    if dims {
                        out.eq(format!("dimensions_n{n}"), all_dims as u8 as f64, 1.0, None);
                    } else {
                        out.le(format!("containment_b1_n{n}"), worst.0, ctx.tol.containment);
                        out.le(format!("containment_b2_n{n}"), worst.1, ctx.tol.containment);
                    }
                }
                sections.push(json!({ "check": if dims { "dimensions" } else { "containment" }, "samples": rows }));
            }
            CertificateCheck::Symplecticity { curves, n_max, horizon } => {
                let mut rows = Vec::new();
                let (mut w_def, mut w_rec) = (0.0f64, 0.0f64);
                for k in 0..*curves {
                    let n = 1 + k % (*n_max).max(1);
                    let k0 = random_symmetric(n, &mut rng);
                    let k1 = random_symmetric(n, &mut rng);
                    let w = rng.gen_range(0.3..3.0);
                    let curve = LinearSystemCurve::from_fn(n, 0.0, *horizon, 1e-2, move |t| &k0 + &k1 * (w * t).cos())?;
                    let m = propagate(&curve, &DMatrix::identity(2 * n, 2 * n), *horizon)?;
                    let def = symplectic_defect(&m);
                    let ev = SymplecticMatrix::with_tolerance(m, 1e-6)?.eigenvalues();
                    let (rec, _) = spectrum_symmetry(&ev);
                    w_def = w_def.max(def);
                    w_rec = w_rec.max(rec);
                    let spec_radius = ev.iter().map(|z| z.norm()).fold(0.0, f64::max);
                    rows.push(json!({ "curve": k, "n": n, "frequency": w, "defect": def, "reciprocity": rec, "spectral_radius": spec_radius }));
                }
                out.le("symplectic_defect", w_def, ctx.tol.symplectic);
                out.le("spectrum_reciprocity", w_rec, ctx.tol.reciprocity);
                sections.push(json!({ "check": "symplecticity", "curves": rows }));
            }
            CertificateCheck::FirstOrder { t, j_cap } => {
                let sys = sys.expect("validated");
                let Pipeline { curve, .. } = pipeline(ctx, sys, out)?;
                let lin = LinearSystemCurve::from_curvature(&curve);
                let r = first_order_certificate(&lin, t.unwrap_or(lin.start()), *j_cap)?;
                out.eq("first_order_span", r.span_dim as f64, r.target_dim as f64, None);
                sections.push(serde_json::to_value(&r).unwrap_or(Value::Null));
            }
        }
    }
    out.put("certificates", sections);
    let mut csv = String::from("name,comparison,value,threshold,pass\n");
    for c in &out.checks {
        csv.push_str(&format!("{},{},{:.12e},{:.12e},{}\n", c.name, c.comparison, c.value, c.threshold, c.pass));
    }
    out.data = csv;
    Ok(())
}

struct ScanSpec<'a> {
    eps: &'a [f64],
    samples: usize,
    slope_radii: &'a [f64],
    slope_samples: usize,
    slope_range: (f64, f64),
}

fn franks_experiment(ctx: &Context, sys: &MagneticSystem, spec: &ScanSpec, opts: &magflow::perturb::FranksOptions, out: &mut Partial) -> Run {
    let seed = ctx.seed.expect("validated");
    let Pipeline { orbit, frame, curve } = pipeline(ctx, sys, out)?;
    let lin = LinearSystemCurve::from_curvature(&curve);
    let n = lin.n();
    let support = opts.support.unwrap_or((lin.start(), lin.end()));
    let w = end_point(&SymplecticMatrix::identity(n), &lin, &ControlVector::zeros(n, opts.modes, support)?, lin.end())?;
    out.put("unperturbed", rows_f64(w.entries()));
    out.put("options", opts);
    out.data = String::from("eps,samples,successes,success_rate,max_residual,max_u_l2,max_u_c2,k_fit,max_iterations,levenberg_events\n");
    out.put("scans", Vec::<Value>::new());
    // one representative solve carries the induced form and its norms
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (target, _) = sphere_target(&w, spec.eps[0], &mut rng)?;
    let mut sol = franks_solve(&lin, &target, opts)?;
    let delta = default_tube_radius(sys, &orbit)?;
    let chart = fermi_chart(sys, &orbit, &frame, delta)?;
    sol.attach_perturbation(&chart, delta, BumpProfile::Exp)?;
    out.put("representative", &sol);
    for &eps in spec.eps {
        let scan = franks_ball_scan(&lin, eps, spec.samples, seed, opts)?;
        out.data.push_str(&format!(
            "{:e},{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{},{}\n",
            scan.eps, scan.samples, scan.successes, scan.success_rate, scan.max_residual, scan.max_u_l2, scan.max_u_c2, scan.k_fit, scan.max_iterations, scan.levenberg_events
        ));
        out.ge(format!("success_rate_eps_{eps:e}"), scan.success_rate, 1.0);
        out.le(format!("max_residual_eps_{eps:e}"), scan.max_residual, ctx.tol.franks_residual);
        if let Some(Value::Array(a)) = out.result.get_mut("scans") {
            a.push(serde_json::to_value(&scan).unwrap_or(Value::Null));
        }
    }
    if !spec.slope_radii.is_empty() {
        let fit = norm_scaling(&lin, spec.slope_radii, spec.slope_samples, seed, opts)?;
        out.ge("norm_scaling_slope_min", fit.slope, spec.slope_range.0);
        out.le("norm_scaling_slope_max", fit.slope, spec.slope_range.1);
        if ctx.dump {
            let mut csv = String::from("eps,mean_l2\n");
            for (e, m) in fit.eps.iter().zip(&fit.mean_l2) {
                csv.push_str(&format!("{e:e},{m:.12e}\n"));
            }
            out.extras.push(("scaling.csv".into(), csv));
        }
        out.put("norm_scaling", fit);
    }
    Ok(())
}

fn variational_experiment(ctx: &Context, sys: &MagneticSystem, lambda: f64, center: Option<f64>, delta: f64, h: f64, out: &mut Partial) -> Run {
    let Pipeline { orbit, frame, curve } = pipeline(ctx, sys, out)?;
    let lin = LinearSystemCurve::from_curvature(&curve);
    let n = lin.n();
    let center = match center {
        Some(c) => c,
        None => {
            let (t0, len) = (orbit.start_time(), orbit.duration());
            (1..40)
                .map(|k| t0 + k as f64 * len / 40.0)
                .find(|&c| isolation_distance(sys, &orbit, (c - lambda, c + lambda), lambda) > 2.0 * delta)
                .ok_or_else(|| magflow::Error::Invalid("no pulse window is isolated from the rest of the orbit".into()))?
        }
    };
    let cert = basis_variation_certificate(&lin, center, lambda, 1.0)?;
    out.eq("basis_rank", cert.rank.dim as f64, (2 * n) as f64, None);
    out.put("basis", &cert);
    let mut csv = String::from("channel,kind,component,v,vp,v_fd,vp_fd\n");
    let mut worst: f64 = 0.0;
    for kind in ["dirac", "dirac_derivative"] {
        for ch in 0..n {
            let c = if kind == "dirac" {
                ScalarControl::Dirac { center, width: lambda, amplitude: 1.0 }
            } else {
                ScalarControl::DiracDerivative { center, width: lambda, amplitude: 1.0 }
            };
            let (v, vp) = variational_response(&lin, &c, ch)?;
            let (fv, fvp) = variational_response_fd(sys, &orbit, &frame, &curve, &c, ch, delta, h)?;
            for i in 0..n {
                csv.push_str(&format!("{ch},{kind},{i},{:.12e},{:.12e},{:.12e},{:.12e}\n", v[i], vp[i], fv[i], fvp[i]));
            }
            worst = worst.max((&v - &fv).amax()).max((&vp - &fvp).amax());
        }
    }
    out.data = csv;
    out.put("pulse", json!({ "center": center, "lambda": lambda, "delta": delta, "fd_parameter": h }));
    out.le("duhamel_vs_flow", worst, ctx.tol.variational);
    Ok(())
}
