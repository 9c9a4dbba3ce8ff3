//! Magnetic geodesic flow `D/dt gamma' = Y gamma'` on a chart.
//!
//! States are `(x, v)` in coordinates. Periodic coordinates are kept
//! unwrapped along a trajectory; closure is measured modulo the periods.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{c0_norm, christoffels_unchecked, lorentz_unchecked, ChartMetric, ClosedTwoForm};
use crate::linalg::{min_norm_solve, rk4_step};

/// Relative energy drift above which integration is rejected.
pub const ENERGY_DRIFT_LIMIT: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct MagneticSystem {
    pub chart: Arc<ChartMetric>,
    pub form: Arc<ClosedTwoForm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub x: DVector<f64>,
    pub v: DVector<f64>,
}

impl PhaseState {
    pub fn new(x: DVector<f64>, v: DVector<f64>) -> Self {
        PhaseState { x, v }
    }

    pub fn from_slices(x: &[f64], v: &[f64]) -> Self {
        PhaseState::new(DVector::from_column_slice(x), DVector::from_column_slice(v))
    }

    pub fn flat(&self) -> DVector<f64> {
        let m = self.x.len();
        DVector::from_iterator(2 * m, self.x.iter().chain(self.v.iter()).cloned())
    }

    pub fn from_flat(y: &DVector<f64>) -> Self {
        let m = y.len() / 2;
        PhaseState::new(y.rows(0, m).into_owned(), y.rows(m, m).into_owned())
    }
}

impl MagneticSystem {
    pub fn new(chart: ChartMetric, form: ClosedTwoForm) -> Result<Self> {
        Self::from_arcs(Arc::new(chart), Arc::new(form))
    }

    pub fn from_arcs(chart: Arc<ChartMetric>, form: Arc<ClosedTwoForm>) -> Result<Self> {
        if chart.dim() != form.dim() {
            return Err(Error::Shape(format!(
                "chart has dimension {} but the form has dimension {}",
                chart.dim(),
                form.dim()
            )));
        }
        Ok(MagneticSystem { chart, form })
    }

    pub fn dim(&self) -> usize {
        self.chart.dim()
    }

    /// The same chart with a different form.
    pub fn with_form(&self, form: ClosedTwoForm) -> Result<Self> {
        Self::from_arcs(self.chart.clone(), Arc::new(form))
    }

    /// `H(x, v) = |v|^2 / 2`.
    pub fn energy(&self, s: &PhaseState) -> f64 {
        0.5 * self.chart.inner(&s.x, &s.v, &s.v)
    }

    /// Velocity of the given direction rescaled to energy `c`.
    pub fn state_on_energy(&self, x: DVector<f64>, direction: DVector<f64>, c: f64) -> Result<PhaseState> {
        self.chart.check_point(&x)?;
        let n2 = self.chart.inner(&x, &direction, &direction);
        if !(n2 > 0.0) || !(c > 0.0) {
            return Err(Error::Invalid("energy and direction must be positive".into()));
        }
        let v = direction * (2.0 * c / n2).sqrt();
        Ok(PhaseState::new(x, v))
    }

    /// `(x', v') = (v, Y v - Gamma(v, v))`.
    pub fn vector_field(&self, s: &PhaseState) -> Result<PhaseState> {
        self.chart.check_point(&s.x)?;
        self.field_parts(&s.x, &s.v).map(|(a, b)| PhaseState::new(a, b))
    }

    fn field_parts(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let y = lorentz_unchecked(&self.chart, &self.form, x)?;
        let mut acc = y * v;
        if !self.chart.is_flat() {
            acc -= christoffels_unchecked(&self.chart, x)?.contract(v, v);
        }
        Ok((v.clone(), acc))
    }

    pub(crate) fn field_flat(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.dim();
        let x = y.rows(0, m).into_owned();
        let v = y.rows(m, m).into_owned();
        let (a, b) = self.field_parts(&x, &v)?;
        let mut out = DVector::zeros(2 * m);
        out.rows_mut(0, m).copy_from(&a);
        out.rows_mut(m, m).copy_from(&b);
        Ok(out)
    }

    /// One RK4 step of the flow.
    pub fn step(&self, s: &PhaseState, h: f64) -> Result<PhaseState> {
        let y = rk4_step(&|y: &DVector<f64>| self.field_flat(y), &s.flat(), h)?;
        Ok(PhaseState::from_flat(&y))
    }
}

/// Trajectory sampled on a uniform grid `t_k = t0 + k h`.
#[derive(Clone, Debug, Serialize)]
pub struct OrbitSegment {
    pub times: Vec<f64>,
    pub states: Vec<PhaseState>,
    pub step: f64,
    pub energy: f64,
    pub energy_drift: f64,
    pub period: Option<f64>,
    pub closure: Option<f64>,
}

impl OrbitSegment {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn duration(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn first(&self) -> &PhaseState {
        &self.states[0]
    }

    pub fn last(&self) -> &PhaseState {
        &self.states[self.states.len() - 1]
    }

    pub fn speed(&self) -> f64 {
        (2.0 * self.energy).sqrt()
    }

    /// Samples `k0..=k1` as an open segment.
    pub fn slice(&self, k0: usize, k1: usize) -> Result<OrbitSegment> {
        if k0 >= k1 || k1 >= self.len() {
            return Err(Error::Invalid(format!("bad slice {k0}..={k1} of {} samples", self.len())));
        }
        Ok(OrbitSegment {
            times: self.times[k0..=k1].to_vec(),
            states: self.states[k0..=k1].to_vec(),
            step: self.step,
            energy: self.energy,
            energy_drift: self.energy_drift,
            period: None,
            closure: None,
        })
    }

    /// `t, x1.., v1.., energy` rows.
    pub fn to_csv(&self, sys: &MagneticSystem) -> String {
        let m = sys.dim();
        let mut out = String::from("t");
        for i in 1..=m {
            out.push_str(&format!(",x{i}"));
        }
        for i in 1..=m {
            out.push_str(&format!(",v{i}"));
        }
        out.push_str(",energy\n");
        for (t, s) in self.times.iter().zip(&self.states) {
            out.push_str(&format!("{t:.12e}"));
            for a in s.x.iter().chain(s.v.iter()) {
                out.push_str(&format!(",{a:.12e}"));
            }
            out.push_str(&format!(",{:.12e}\n", sys.energy(s)));
        }
        out
    }
}

/// Number of RK4 steps used for a duration and a requested step size.
pub fn step_count(duration: f64, step: f64) -> usize {
    ((duration / step) - 1e-9).ceil().max(1.0) as usize
}

/// RK4 over `[0, duration]` with `step_count(duration, step)` equal steps.
pub fn integrate(sys: &MagneticSystem, start: &PhaseState, duration: f64, step: f64) -> Result<OrbitSegment> {
    if !(duration > 0.0) || !(step > 0.0) {
        return Err(Error::Invalid("duration and step must be positive".into()));
    }
    integrate_steps(sys, start, 0.0, duration, step_count(duration, step))
}

/// RK4 over `[t0, t0 + duration]` with exactly `steps` equal steps.
pub fn integrate_steps(
    sys: &MagneticSystem,
    start: &PhaseState,
    t0: f64,
    duration: f64,
    steps: usize,
) -> Result<OrbitSegment> {
    let seg = integrate_steps_unchecked(sys, start, t0, duration, steps)?;
    if seg.energy_drift > ENERGY_DRIFT_LIMIT {
        return Err(Error::EnergyDrift { drift: seg.energy_drift, limit: ENERGY_DRIFT_LIMIT });
    }
    Ok(seg)
}

/// As `integrate_steps`, reporting the drift instead of failing on it.
pub fn integrate_steps_unchecked(
    sys: &MagneticSystem,
    start: &PhaseState,
    t0: f64,
    duration: f64,
    steps: usize,
) -> Result<OrbitSegment> {
    sys.chart.check_point(&start.x)?;
    if start.v.len() != sys.dim() {
        return Err(Error::Shape("velocity has the wrong length".into()));
    }
    let steps = steps.max(1);
    let h = duration / steps as f64;
    let e0 = sys.energy(start);
    let mut states = Vec::with_capacity(steps + 1);
    let mut times = Vec::with_capacity(steps + 1);
    states.push(start.clone());
    times.push(t0);
    let mut drift: f64 = 0.0;
    let mut cur = start.clone();
    for k in 1..=steps {
        let t = t0 + k as f64 * h;
        cur = sys.step(&cur, h).map_err(|e| match e {
            Error::SingularMetric { .. } => Error::DomainExit { time: t },
            other => other,
        })?;
        if !sys.chart.contains(&cur.x) || !cur.v.iter().all(|a| a.is_finite()) {
            return Err(Error::DomainExit { time: t });
        }
        let e = sys.energy(&cur);
        drift = drift.max(if e0 > 0.0 { (e - e0).abs() / e0 } else { (e - e0).abs() });
        states.push(cur.clone());
        times.push(t);
    }
    Ok(OrbitSegment {
        times,
        states,
        step: h,
        energy: e0,
        energy_drift: drift,
        period: None,
        closure: None,
    })
}

/// Distance between two phase states, with positions compared modulo periods.
pub fn phase_distance(sys: &MagneticSystem, a: &PhaseState, b: &PhaseState) -> f64 {
    let dx = sys.chart.displacement(&a.x, &b.x);
    (dx.norm_squared() + (&b.v - &a.v).norm_squared()).sqrt()
}

#[derive(Clone, Debug)]
pub struct PeriodicSearch {
    pub tol: f64,
    pub max_iter: usize,
    pub fd_delta: f64,
    pub max_subharmonic: usize,
    pub subharmonic_tol: f64,
}

impl Default for PeriodicSearch {
    fn default() -> Self {
        PeriodicSearch {
            tol: 1e-9,
            max_iter: 40,
            fd_delta: 1e-6,
            max_subharmonic: 8,
            subharmonic_tol: 1e-7,
        }
    }
}

fn endpoint(sys: &MagneticSystem, s: &PhaseState, period: f64, steps: usize) -> Result<PhaseState> {
    let h = period / steps as f64;
    let mut cur = s.clone();
    for k in 1..=steps {
        cur = sys.step(&cur, h)?;
        if !sys.chart.contains(&cur.x) {
            return Err(Error::DomainExit { time: k as f64 * h });
        }
    }
    Ok(cur)
}

fn closure_residual(sys: &MagneticSystem, z: &DVector<f64>, steps: usize, c: f64) -> Result<DVector<f64>> {
    let m = sys.dim();
    let s = PhaseState::new(z.rows(0, m).into_owned(), z.rows(m, m).into_owned());
    let period = z[2 * m];
    if !(period > 0.0) {
        return Err(Error::Invalid("period became non-positive".into()));
    }
    let e = endpoint(sys, &s, period, steps)?;
    let mut r = DVector::zeros(2 * m + 1);
    r.rows_mut(0, m).copy_from(&sys.chart.displacement(&s.x, &e.x));
    r.rows_mut(m, m).copy_from(&(&e.v - &s.v));
    r[2 * m] = sys.energy(&s) - c;
    Ok(r)
}

/// Newton shooting for a closed orbit near `guess` with period near
/// `period_guess`, followed by a subharmonic scan for the minimal period.
pub fn find_periodic_orbit(
    sys: &MagneticSystem,
    guess: &PhaseState,
    period_guess: f64,
    step: f64,
    opts: &PeriodicSearch,
) -> Result<OrbitSegment> {
    let m = sys.dim();
    let c = sys.energy(guess);
    let steps = step_count(period_guess, step);
    let mut z = DVector::zeros(2 * m + 1);
    z.rows_mut(0, m).copy_from(&guess.x);
    z.rows_mut(m, m).copy_from(&guess.v);
    z[2 * m] = period_guess;
    let closure_of = |r: &DVector<f64>| r.rows(0, 2 * m).norm();
    let mut r = closure_residual(sys, &z, steps, c)?;
    let mut iterations = 0;
    while closure_of(&r) > opts.tol || r[2 * m].abs() > opts.tol {
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                what: "periodic orbit search",
                iterations,
                residual: closure_of(&r),
            });
        }
        iterations += 1;
        let dim = 2 * m + 1;
        let mut jac = DMatrix::zeros(dim, dim);
        for k in 0..dim {
            let d = opts.fd_delta * z[k].abs().max(1.0);
            let mut zp = z.clone();
            zp[k] += d;
            let mut zm = z.clone();
            zm[k] -= d;
            let col = (closure_residual(sys, &zp, steps, c)? - closure_residual(sys, &zm, steps, c)?) / (2.0 * d);
            jac.set_column(k, &col);
        }
        let dz = min_norm_solve(&jac, &(-&r), 1e-10);
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial = &z + &dz * lambda;
            if let Ok(rt) = closure_residual(sys, &trial, steps, c) {
                if rt.norm() < r.norm() {
                    z = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence {
                what: "periodic orbit search",
                iterations,
                residual: closure_of(&r),
            });
        }
    }
    let start = PhaseState::new(z.rows(0, m).into_owned(), z.rows(m, m).into_owned());
    let full_period = z[2 * m];
    let mut period = full_period;
    for k in (2..=opts.max_subharmonic).rev() {
        if steps % k != 0 {
            let sub = integrate_steps_unchecked(sys, &start, 0.0, full_period / k as f64, step_count(full_period / k as f64, step))?;
            if phase_distance(sys, &start, sub.last()) <= opts.subharmonic_tol {
                period = full_period / k as f64;
                break;
            }
        } else {
            let e = endpoint(sys, &start, full_period / k as f64, steps / k)?;
            if phase_distance(sys, &start, &e) <= opts.subharmonic_tol {
                period = full_period / k as f64;
                break;
            }
        }
    }
    let sub_steps = if period == full_period { steps } else { step_count(period, step) };
    let mut seg = integrate_steps(sys, &start, 0.0, period, sub_steps)?;
    seg.closure = Some(phase_distance(sys, &start, seg.last()));
    seg.period = Some(period);
    Ok(seg)
}

/// Verifies that an integrated segment closes up and marks it periodic.
pub fn mark_periodic(sys: &MagneticSystem, mut seg: OrbitSegment, tol: f64) -> Result<OrbitSegment> {
    let closure = phase_distance(sys, seg.first(), seg.last());
    if closure > tol {
        return Err(Error::NoConvergence { what: "orbit closure", iterations: 0, residual: closure });
    }
    seg.period = Some(seg.duration());
    seg.closure = Some(closure);
    Ok(seg)
}

/// `K = min(1 / (|Omega|_C0 + 1)^2, inj / (2c))`.
pub fn magnetic_injectivity_radius(sys: &MagneticSystem, energy: f64, samples: usize) -> Result<f64> {
    if !(energy > 0.0) {
        return Err(Error::Invalid("energy must be positive".into()));
    }
    let w = c0_norm(&sys.chart, &sys.form, samples)?;
    Ok((1.0 / (w + 1.0).powi(2)).min(sys.chart.injectivity_radius() / (2.0 * energy)))
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfIntersection {
    pub first_segment: usize,
    pub second_segment: usize,
    pub distance: f64,
}

fn segment_distance(a0: &DVector<f64>, a1: &DVector<f64>, b0: &DVector<f64>, b1: &DVector<f64>) -> f64 {
    let d1 = a1 - a0;
    let d2 = b1 - b0;
    let r = a0 - b0;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let (s, t);
    if a <= 1e-300 && e <= 1e-300 {
        return r.norm();
    }
    if a <= 1e-300 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= 1e-300 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let den = a * e - b * b;
            let mut s0 = if den > 1e-300 { ((b * f - c * e) / den).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    (a0 + d1 * s - (b0 + d2 * t)).norm()
}

/// Brute-force search for two non-neighbouring chords of the sampled curve
/// closer than `tol`. Positions on periodic axes are compared through their
/// nearest images.
pub fn find_self_intersection(
    sys: &MagneticSystem,
    orbit: &OrbitSegment,
    tol: f64,
    exclusion: usize,
) -> Option<SelfIntersection> {
    let n = orbit.steps();
    let closed = orbit.period.is_some();
    let pts: Vec<&DVector<f64>> = orbit.states.iter().map(|s| &s.x).collect();
    let chords: Vec<DVector<f64>> = (0..n).map(|i| sys.chart.displacement(pts[i], pts[i + 1])).collect();
    let origin = DVector::zeros(sys.dim());
    for i in 0..n {
        for j in (i + exclusion + 1)..n {
            if closed && n - j + i <= exclusion {
                continue;
            }
            let off = sys.chart.displacement(pts[i], pts[j]);
            let reach = chords[i].norm() + chords[j].norm() + tol;
            if off.norm() > reach {
                continue;
            }
            let d = segment_distance(&origin, &chords[i], &off, &(&off + &chords[j]));
            if d < tol {
                return Some(SelfIntersection { first_segment: i, second_segment: j, distance: d });
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn larmor() -> MagneticSystem {
        MagneticSystem::new(ChartMetric::flat_torus(2), ClosedTwoForm::constant_planar(1.0)).unwrap()
    }

    #[test]
    fn larmor_circle_closes_with_radius_one() {
        let sys = larmor();
        let s = PhaseState::from_slices(&[0.5, 0.5], &[1.0, 0.0]);
        let seg = integrate(&sys, &s, 2.0 * PI, 1e-3).unwrap();
        assert!(seg.energy_drift < 1e-10);
        assert!(phase_distance(&sys, seg.first(), seg.last()) < 1e-9);
        // the Lorentz force Y v = (0, 1) points at the centre
        let centre = DVector::from_column_slice(&[0.5, 1.5]);
        for st in &seg.states {
            assert_relative_eq!((&st.x - &centre).norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn geodesic_leaving_the_sphere_chart_reports_exit_time() {
        let sys = MagneticSystem::new(ChartMetric::round_sphere(), ClosedTwoForm::zero(2)).unwrap();
        let s = PhaseState::from_slices(&[0.5, 0.0], &[-1.0, 0.0]);
        match integrate(&sys, &s, 1.0, 1e-3) {
            Err(Error::DomainExit { time }) => assert!((time - 0.5).abs() < 2e-3),
            other => panic!("expected exit, got {other:?}"),
        }
    }

    #[test]
    fn coarse_step_is_rejected_on_drift() {
        let sys = larmor();
        let s = PhaseState::from_slices(&[0.5, 0.5], &[3.0, 0.0]);
        assert!(matches!(integrate(&sys, &s, 20.0, 0.2), Err(Error::EnergyDrift { .. })));
    }

    #[test]
    fn injectivity_radius_of_larmor_system() {
        let k = magnetic_injectivity_radius(&larmor(), 0.5, 16).unwrap();
        assert_relative_eq!(k, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn closed_geodesic_found_from_doubled_period() {
        let sys = MagneticSystem::new(ChartMetric::flat_torus(2), ClosedTwoForm::zero(2)).unwrap();
        let s = PhaseState::from_slices(&[0.1, 0.2], &[1.0, 0.0]);
        let seg = find_periodic_orbit(&sys, &s, 2.0, 1e-3, &PeriodicSearch::default()).unwrap();
        assert_relative_eq!(seg.period.unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn segment_distance_of_crossing_chords() {
        let p = |a: f64, b: f64| DVector::from_column_slice(&[a, b]);
        assert_relative_eq!(segment_distance(&p(0.0, 0.0), &p(1.0, 1.0), &p(0.0, 1.0), &p(1.0, 0.0)), 0.0);
        assert_relative_eq!(segment_distance(&p(0.0, 0.0), &p(1.0, 0.0), &p(0.0, 1.0), &p(1.0, 1.0)), 1.0);
    }
}
