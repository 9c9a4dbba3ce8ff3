use magflow::flow::{find_periodic_orbit, integrate, PeriodicSearch};
use magflow::frame::{fermi_chart, magnetic_curvature, transported_frame};
use magflow::perturb::{
    build_perturbation, curvature_shift, default_tube_radius, isolation_distance, orbit_deviation, reintegrate, variational_response,
    variational_response_fd, BumpProfile, ControlFamily, ScalarControl,
};
use magflow::{ChartMetric, ClosedTwoForm, ControlVector, LinearSystemCurve, MagneticSystem, PhaseState};
use nalgebra::DMatrix;

fn larmor() -> MagneticSystem {
    MagneticSystem::new(ChartMetric::flat_torus(2), ClosedTwoForm::constant_planar(1.0)).unwrap()
}

#[test]
fn curvature_shift_through_the_pipeline() {
    let sys = larmor();
    let orbit = integrate(&sys, &PhaseState::from_slices(&[0.5, 0.5], &[1.0, 0.0]), 0.2, 1e-3).unwrap();
    let frame = transported_frame(&sys, &orbit).unwrap();
    let curve = magnetic_curvature(&sys, &orbit, &frame).unwrap();
    let delta = default_tube_radius(&sys, &orbit).unwrap();
    assert!((delta - 0.02).abs() < 1e-12);
    let chart = fermi_chart(&sys, &orbit, &frame, delta).unwrap();
    let coeffs = DMatrix::from_row_slice(1, 4, &[0.7, -0.3, 0.2, 0.1]);
    let fam = ControlFamily::new(ControlVector::from_coefficients(1, (0.02, 0.18), coeffs).unwrap());
    let pert = build_perturbation(&fam, &chart, delta, BumpProfile::Exp).unwrap();
    assert!(pert.axis_residual(100) <= 1e-12);
    let (psys, porbit) = reintegrate(&sys, &orbit, &pert.form()).unwrap();
    assert!(orbit_deviation(&sys, &orbit, &porbit) <= 1e-7);
    assert!(porbit.energy_drift <= 1e-8);
    let pframe = transported_frame(&psys, &porbit).unwrap();
    let pcurve = magnetic_curvature(&psys, &porbit, &pframe).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in curve.times.iter().enumerate() {
        let expect = &curve.k[k] - curvature_shift(&fam, orbit.energy, *t);
        worst = worst.max((&pcurve.k[k] - expect).amax());
    }
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn variational_response_matches_flow_derivative() {
    let sys = larmor();
    let guess = PhaseState::from_slices(&[0.5, 0.5], &[1.0, 0.0]);
    let orbit = find_periodic_orbit(&sys, &guess, std::f64::consts::TAU, 5e-4, &PeriodicSearch::default()).unwrap();
    let frame = transported_frame(&sys, &orbit).unwrap();
    let curve = magnetic_curvature(&sys, &orbit, &frame).unwrap();
    let lin = LinearSystemCurve::from_curvature(&curve);
    let lambda = 0.05;
    let delta = 0.02;
    let center = (1..40)
        .map(|k| k as f64 * std::f64::consts::TAU / 40.0)
        .find(|&c| isolation_distance(&sys, &orbit, (c - lambda, c + lambda), lambda) > 2.0 * delta)
        .expect("an isolated window");
    for c in [
        ScalarControl::Dirac { center, width: lambda, amplitude: 1.0 },
        ScalarControl::DiracDerivative { center, width: lambda, amplitude: 1.0 },
    ] {
        let (v, vp) = variational_response(&lin, &c, 0).unwrap();
        let (fv, fvp) = variational_response_fd(&sys, &orbit, &frame, &curve, &c, 0, delta, 1e-3).unwrap();
        let err = (v[0] - fv[0]).abs().max((vp[0] - fvp[0]).abs());
        assert!(err <= 1e-4, "{c:?}: duhamel ({}, {}) fd ({}, {})", v[0], vp[0], fv[0], fvp[0]);
    }
}
