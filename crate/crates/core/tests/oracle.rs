use magflow::flow::{find_periodic_orbit, integrate, mark_periodic, PeriodicSearch};
use magflow::frame::{magnetic_curvature, transported_frame};
use magflow::linmap::{adjudicate_assemblies, classify_default, fd_linearization, linearized_poincare, relative_error, OrbitLabel};
use magflow::{Assembly, ChartMetric, ClosedTwoForm, LinearSystemCurve, MagneticSystem, OrbitSegment, PhaseState};
use nalgebra::DMatrix;

const TAU: f64 = 2.0 * std::f64::consts::PI;

fn compare(sys: &MagneticSystem, orbit: &OrbitSegment) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let frame = transported_frame(sys, orbit).unwrap();
    let curve = magnetic_curvature(sys, orbit, &frame).unwrap();
    let lin = LinearSystemCurve::from_curvature(&curve);
    let p = linearized_poincare(orbit, &lin).unwrap();
    let fd = fd_linearization(sys, orbit, &frame, &curve, None).unwrap();
    assert!(fd.warning.is_none(), "{:?}", fd.warning);
    let err = relative_error(p.entries(), &fd.matrix);
    (p.into_inner(), fd.matrix, err)
}

#[test]
fn straight_geodesic_monodromy_is_a_shear() {
    let sys = MagneticSystem::new(ChartMetric::flat_torus(2), ClosedTwoForm::zero(2)).unwrap();
    let orbit = integrate(&sys, &PhaseState::from_slices(&[0.2, 0.3], &[1.0, 0.0]), 1.0, 1e-3).unwrap();
    let orbit = mark_periodic(&sys, orbit, 1e-12).unwrap();
    let (p, fd, err) = compare(&sys, &orbit);
    let expect = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
    assert!((&p - &expect).amax() < 1e-12, "{p}");
    assert!((&fd - &expect).amax() < 1e-5, "{fd}");
    assert!(err < 1e-4);
}

#[test]
fn larmor_monodromy_is_identity() {
    let sys = MagneticSystem::new(ChartMetric::flat_torus(2), ClosedTwoForm::constant_planar(1.0)).unwrap();
    let guess = PhaseState::from_slices(&[0.5, 0.5], &[1.0, 0.0]);
    let orbit = find_periodic_orbit(&sys, &guess, TAU, 2e-3, &PeriodicSearch::default()).unwrap();
    let (p, _, err) = compare(&sys, &orbit);
    assert!((&p - DMatrix::identity(2, 2)).amax() < 1e-5, "{p}");
    assert!(err < 1e-4, "{err}");
    let cls = classify_default(&magflow::SymplecticMatrix::new(p).unwrap());
    assert_eq!((cls.label, cls.order), (OrbitLabel::Degenerate, Some(1)));
}

#[test]
fn perturbed_field_agrees_with_oracle() {
    let sys = MagneticSystem::new(ChartMetric::flat_torus(2), ClosedTwoForm::cosine_planar(1.0, 0.1)).unwrap();
    let guess = PhaseState::from_slices(&[0.5, 0.5], &[1.0, 0.0]);
    let orbit = find_periodic_orbit(&sys, &guess, TAU, 2e-3, &PeriodicSearch::default()).unwrap();
    assert!(orbit.closure.unwrap() <= 1e-9);
    let (p, fd, err) = compare(&sys, &orbit);
    assert!(err < 1e-4, "{err}\n{p}\n{fd}");
}

#[test]
fn helix_on_three_torus_selects_rederived_assembly() {
    let b = 1.0;
    let w = DMatrix::from_row_slice(3, 3, &[0.0, b, 0.0, -b, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let sys = MagneticSystem::new(ChartMetric::flat_torus(3), ClosedTwoForm::constant_matrix(&w, "b dx1^dx2")).unwrap();
    // one turn of the circle shifts x3 by exactly one period
    let v3 = b / TAU;
    let vperp = (1.0 - v3 * v3).sqrt();
    let start = PhaseState::from_slices(&[0.3, 0.4, 0.1], &[vperp, 0.0, v3]);
    let orbit = integrate(&sys, &start, TAU / b, 1e-3).unwrap();
    let orbit = mark_periodic(&sys, orbit, 1e-9).unwrap();
    let frame = transported_frame(&sys, &orbit).unwrap();
    let curve = magnetic_curvature(&sys, &orbit, &frame).unwrap();
    let fd = fd_linearization(&sys, &orbit, &frame, &curve, None).unwrap();
    let verdicts = adjudicate_assemblies(&orbit, &curve, &fd.matrix).unwrap();
    assert_eq!(verdicts[0].assembly, Assembly::Rederived, "{verdicts:?}");
    assert!(verdicts[0].relative_error < 1e-4, "{verdicts:?}");
    assert!(verdicts[1].relative_error > 1e-2, "{verdicts:?}");
}
