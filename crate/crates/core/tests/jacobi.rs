use magflow::flow::integrate;
use magflow::frame::{jacobi_initial_data, magnetic_curvature, reduced_jacobi_residual, transported_frame, SampledJacobiField};
use magflow::linmap::fd_jacobi_field;
use magflow::{ChartMetric, ClosedTwoForm, MagneticSystem, PhaseState};
use nalgebra::DVector;

fn constant_field(len: usize, v: &[f64]) -> SampledJacobiField {
    let j = vec![DVector::from_column_slice(v); len];
    let jp = vec![DVector::zeros(v.len()); len];
    SampledJacobiField { j, jp }
}

#[test]
fn constant_field_on_flat_geodesic() {
    let sys = MagneticSystem::new(ChartMetric::flat_torus(3), ClosedTwoForm::zero(3)).unwrap();
    let orbit = integrate(&sys, &PhaseState::from_slices(&[0.1, 0.2, 0.3], &[0.6, 0.8, 0.0]), 1.0, 1e-2).unwrap();
    let frame = transported_frame(&sys, &orbit).unwrap();
    let curve = magnetic_curvature(&sys, &orbit, &frame).unwrap();
    let field = constant_field(orbit.len(), &[0.3, -0.1, 0.7]);
    let r = reduced_jacobi_residual(&sys.chart, &frame, &curve, &field).unwrap();
    assert!(r.equation <= 1e-8 && r.slaving <= 1e-8, "{r:?}");
    assert!(r.momentum_drift <= 1e-8);
}

#[test]
fn translating_larmor_circles() {
    let sys = MagneticSystem::new(ChartMetric::flat_torus(2), ClosedTwoForm::constant_planar(1.0)).unwrap();
    let orbit = integrate(&sys, &PhaseState::from_slices(&[0.5, 0.5], &[1.0, 0.0]), 3.0, 1e-3).unwrap();
    let frame = transported_frame(&sys, &orbit).unwrap();
    let curve = magnetic_curvature(&sys, &orbit, &frame).unwrap();
    for v in [[1.0, 0.0], [0.0, 1.0], [0.6, -0.8]] {
        let field = constant_field(orbit.len(), &v);
        let r = reduced_jacobi_residual(&sys.chart, &frame, &curve, &field).unwrap();
        assert!(r.equation <= 1e-6 && r.slaving <= 1e-6 && r.consistency <= 1e-6, "{v:?}: {r:?}");
    }
}

#[test]
fn sphere_with_weak_field_matches_flow_linearization() {
    let sys = MagneticSystem::new(ChartMetric::round_sphere(), ClosedTwoForm::sphere_area(0.1)).unwrap();
    let start = PhaseState::from_slices(&[1.3, 0.4], &[0.3, 1.0]);
    let orbit = integrate(&sys, &start, 1.5, 1e-3).unwrap();
    let frame = transported_frame(&sys, &orbit).unwrap();
    let curve = magnetic_curvature(&sys, &orbit, &frame).unwrap();
    for (f, fp) in [(0.4, -0.2), (-0.1, 0.5)] {
        let (j0, jp0) = jacobi_initial_data(&frame, &curve, 0, &DVector::from_element(1, f), &DVector::from_element(1, fp));
        let field = fd_jacobi_field(&sys, &orbit, &j0, &jp0, 1e-4).unwrap();
        let r = reduced_jacobi_residual(&sys.chart, &frame, &curve, &field).unwrap();
        assert!(r.equation <= 1e-5 && r.slaving <= 1e-5, "{r:?}");
        assert!(r.momentum_drift <= 1e-8, "{}", r.momentum_drift);
    }
}
