use magflow::flow::integrate;
use magflow::frame::{magnetic_curvature, transported_frame};
use magflow::linmap::propagate;
use magflow::perturb::{franks_multi_leg, norm_scaling, sphere_target, support_separation, FranksOptions};
use magflow::sympctl::{
    bracket_ledger, end_point, end_point_differential, first_order_certificate, second_order_certificate, tangency_defect,
};
use magflow::{ChartMetric, ClosedTwoForm, ControlVector, LinearSystemCurve, MagneticSystem, PhaseState, SymplecticMatrix};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

fn random_controls(n: usize, support: (f64, f64), scale: f64, rng: &mut ChaCha8Rng) -> ControlVector {
    let ch = n * (n + 1) / 2;
    ControlVector::from_coefficients(n, support, DMatrix::from_fn(ch, 4, |_, _| scale * rng.gen_range(-1.0..1.0))).unwrap()
}

fn smooth_curve(n: usize, rng: &mut ChaCha8Rng, horizon: f64) -> LinearSystemCurve {
    let k0 = random_symmetric(n, rng);
    let k1 = random_symmetric(n, rng);
    let w = rng.gen_range(0.5..2.0);
    LinearSystemCurve::from_fn(n, 0.0, horizon, 1e-3, move |t| &k0 + &k1 * (w * t).sin()).unwrap()
}

#[test]
fn ledgers_for_n_up_to_six() {
    for n in 1..=6 {
        let l = bracket_ledger(n);
        assert!(l.pass(), "n = {n}: {:?}", l.failures);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 1..=6 {
        for _ in 0..5 {
            let curve = LinearSystemCurve::constant(random_symmetric(n, &mut rng), 1.0, 0.01).unwrap();
            let r = second_order_certificate(&curve, 0.0).unwrap();
            assert!(r.pass, "n = {n}: {:?}", r.dims);
        }
    }
}

#[test]
fn generic_first_order_span() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let curve = LinearSystemCurve::constant(random_symmetric(2, &mut rng), 1.0, 0.01).unwrap();
    let r = first_order_certificate(&curve, 0.0, 4).unwrap();
    assert_eq!(r.span_dim, 10);
}

#[test]
fn differential_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=2 {
        let curve = smooth_curve(n, &mut rng, 1.0);
        let xbar = SymplecticMatrix::from_hamiltonian(&random_symmetric(2 * n, &mut rng)).unwrap();
        let ubar = random_controls(n, (0.1, 0.9), 0.5, &mut rng);
        let v = random_controls(n, (0.1, 0.9), 1.0, &mut rng);
        let d = end_point_differential(&xbar, &curve, &ubar, &v, 1.0).unwrap();
        let h = 1e-4;
        let plus = end_point(&xbar, &curve, &ubar.add(&v, h).unwrap(), 1.0).unwrap();
        let minus = end_point(&xbar, &curve, &ubar.add(&v, -h).unwrap(), 1.0).unwrap();
        let fd = (plus.entries() - minus.entries()) / (2.0 * h);
        assert!((&d - fd).amax() <= 1e-5);
        let x_end = end_point(&xbar, &curve, &ubar, 1.0).unwrap();
        assert!(tangency_defect(&d, &x_end) <= 1e-8);
        let d2 = end_point_differential(&xbar, &curve, &ubar, &v.scaled(2.0), 1.0).unwrap();
        assert!((d2 - &d * 2.0).amax() <= 1e-12);
    }
}

#[test]
fn end_point_is_symplectic_and_bilinear() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let curve = smooth_curve(2, &mut rng, 1.0);
    let u = random_controls(2, (0.0, 1.0), 2.0, &mut rng);
    let xbar = SymplecticMatrix::from_hamiltonian(&random_symmetric(4, &mut rng)).unwrap();
    let e_i = end_point(&SymplecticMatrix::identity(2), &curve, &u, 1.0).unwrap();
    let e_x = end_point(&xbar, &curve, &u, 1.0).unwrap();
    assert!(e_x.defect() <= 1e-8);
    assert!((e_x.entries() - e_i.entries() * xbar.entries()).amax() <= 1e-10);
    let zero = ControlVector::zeros(2, 4, (0.0, 1.0)).unwrap();
    let free = end_point(&xbar, &curve, &zero, 1.0).unwrap();
    assert!((free.entries() - propagate(&curve, xbar.entries(), 1.0).unwrap()).amax() <= 1e-12);
}

#[test]
fn small_constant_control_first_order() {
    // K = 0 and a single window-shaped u_22 of size eps: response is linear to O(eps^2)
    let curve = LinearSystemCurve::constant(DMatrix::zeros(1, 1), 1.0, 1e-3).unwrap();
    let id = SymplecticMatrix::identity(1);
    let zero = ControlVector::zeros(1, 1, (0.2, 0.8)).unwrap();
    let w0 = end_point(&id, &curve, &zero, 1.0).unwrap();
    let dir = ControlVector::from_coefficients(1, (0.2, 0.8), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let d = end_point_differential(&id, &curve, &zero, &dir, 1.0).unwrap();
    for eps in [1e-2, 1e-3] {
        let x = end_point(&id, &curve, &dir.scaled(eps), 1.0).unwrap();
        let err = (x.entries() - w0.entries() - &d * eps).amax();
        assert!(err <= 10.0 * eps * eps, "{eps}: {err}");
    }
}

#[test]
fn franks_norm_scaling_on_the_circle() {
    let curve = LinearSystemCurve::constant(DMatrix::identity(1, 1), 0.2, 1e-3).unwrap();
    let fit = norm_scaling(&curve, &[1e-4, 1e-3, 1e-2], 4, 17, &FranksOptions::default()).unwrap();
    assert!(fit.slope >= 0.4 && fit.slope <= 1.1, "{fit:?}");
}

#[test]
fn two_leg_split_has_disjoint_supports() {
    let sys = MagneticSystem::new(ChartMetric::flat_torus(2), ClosedTwoForm::constant_planar(1.0)).unwrap();
    let orbit = integrate(&sys, &PhaseState::from_slices(&[0.5, 0.5], &[1.0, 0.0]), 0.4, 1e-3).unwrap();
    let frame = transported_frame(&sys, &orbit).unwrap();
    let curve = LinearSystemCurve::from_curvature(&magnetic_curvature(&sys, &orbit, &frame).unwrap());
    let w = end_point(&SymplecticMatrix::identity(1), &curve, &ControlVector::zeros(1, 8, (0.0, 0.4)).unwrap(), 0.4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, gen) = sphere_target(&w, 1e-3, &mut rng).unwrap();
    let delta = 0.02;
    let sol = franks_multi_leg(&curve, 2, &gen, 0.05, &FranksOptions::default()).unwrap();
    assert!(sol.converged);
    assert!(sol.residual <= 1e-5, "{}", sol.residual);
    let sep = support_separation(&sys, &orbit, &sol.supports);
    assert!(sep > 4.0 * delta / 3.0, "{sep}");
}
