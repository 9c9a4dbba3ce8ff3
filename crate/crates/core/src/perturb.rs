//! Exact perturbations `Omega + d eta` supported in a tube around an orbit
//! segment, their effect on the magnetic curvature, first-order responses of
//! the flow, and a constructive Franks' lemma driven through the End-Point map.
//!
//! Chart coordinates are those of [`FermiChart`]: `y_1` is orbit time and
//! `y_2..y_m` are the normal coordinates `x_perp`. Every perturbation here has
//! the form `eta = phi dy_1`, so `d eta = d phi ^ dy_1` is exact by
//! construction and supported wherever `phi` is.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{integrate_steps_unchecked, MagneticSystem, OrbitSegment};
use crate::frame::{fermi_chart, reduced_coordinates, CurvatureCurve, FermiChart, FermiFrame};
use crate::geometry::{christoffels_unchecked, lorentz_unchecked, ClosedTwoForm};
use crate::linalg::{halton, min_norm_solve, simpson_weights, symplectic_j, PRIMES};
use crate::linmap::{magnus_step, propagate_all, LinearSystemCurve, SymplecticMatrix};
use crate::sympctl::{end_point, end_point_jacobian, rank_info, rows_f64, tangent_space_basis, window, ControlBasis, ControlVector, RankInfo, DEFAULT_MODES};

/// Radial cutoff `f` with `f = 1` for `3 lambda <= 1` and `f = 0` for `3 lambda >= 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BumpProfile {
    /// Built from `exp(-1/s)`; smooth to all orders.
    #[default]
    Exp,
    /// Quintic smoothstep; twice continuously differentiable.
    Quintic,
}

fn psi(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let e = (-1.0 / s).exp();
    (e, e / (s * s), e * (1.0 / s.powi(4) - 2.0 / s.powi(3)))
}

impl BumpProfile {
    /// `(f, f', f'')` at `lambda`.
    pub fn eval(self, lambda: f64) -> (f64, f64, f64) {
        let s = 3.0 * lambda - 1.0;
        if s <= 0.0 {
            return (1.0, 0.0, 0.0);
        }
        if s >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        // smooth step h(s) rising from 0 to 1; f = 1 - h(3 lambda - 1)
        let (h, h1, h2) = match self {
            BumpProfile::Quintic => (
                s * s * s * (10.0 - 15.0 * s + 6.0 * s * s),
                30.0 * s * s * (1.0 - s) * (1.0 - s),
                60.0 * s * (1.0 - s) * (1.0 - 2.0 * s),
            ),
            BumpProfile::Exp => {
                let (a, a1, a2) = psi(s);
                let (b, b1m, b2) = psi(1.0 - s);
                let b1 = -b1m;
                let d = a + b;
                let num1 = a1 * b - a * b1;
                let h1 = num1 / (d * d);
                let h2 = ((a2 * b - a * b2) * d - 2.0 * num1 * (a1 + b1)) / (d * d * d);
                (a / d, h1, h2)
            }
        };
        (1.0 - h, -3.0 * h1, -9.0 * h2)
    }
}

/// Controls `u_ij`, `i <= j`, as the coefficients of the perturbation
/// potential. Channels follow [`ControlBasis`] order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlFamily {
    controls: ControlVector,
}

impl ControlFamily {
    pub fn new(controls: ControlVector) -> Self {
        ControlFamily { controls }
    }

    pub fn controls(&self) -> &ControlVector {
        &self.controls
    }

    pub fn n(&self) -> usize {
        self.controls.n()
    }

    /// The family whose curvature shift realizes the control-system input
    /// `w`, i.e. `U / sqrt(2c) = sum w_ij E(ij)`: off-diagonal channels are
    /// scaled by `sqrt(2c)` and diagonal ones by `2 sqrt(2c)`.
    pub fn from_control_system(w: &ControlVector, energy: f64) -> Result<Self> {
        let r = (2.0 * energy).sqrt();
        let basis = ControlBasis::new(w.n());
        let mut c = w.coefficients().clone();
        for (k, &(i, j)) in basis.pairs.iter().enumerate() {
            let s = if i == j { 2.0 * r } else { r };
            c.row_mut(k).scale_mut(s);
        }
        Ok(ControlFamily { controls: ControlVector::from_coefficients(w.n(), w.support(), c)? })
    }

    /// `[u_ij(t)]` with symmetric fill.
    pub fn matrix_at(&self, t: f64) -> DMatrix<f64> {
        let n = self.n();
        let vals = self.controls.values(t);
        let mut m = DMatrix::zeros(n, n);
        for (k, &(i, j)) in ControlBasis::new(n).pairs.iter().enumerate() {
            m[(i, j)] = vals[k];
            m[(j, i)] = vals[k];
        }
        m
    }
}

/// The displayed matrix `U(t) = [u_ij(t)]`.
pub fn shift_matrix(u: &ControlFamily, t: f64) -> DMatrix<f64> {
    u.matrix_at(t)
}

/// The change `K^Omega - K^{Omega + d eta}` produced by [`build_perturbation`]
/// at energy `c`: `U(t) / sqrt(2c)`, which is `U(t)` on the unit-speed
/// level `2c = 1`.
pub fn curvature_shift(u: &ControlFamily, energy: f64, t: f64) -> DMatrix<f64> {
    u.matrix_at(t) / (2.0 * energy).sqrt()
}

/// Scalar controls for single-channel responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarControl {
    /// `amplitude * w((t - a)/(b - a))` with the window of [`window`].
    Window { support: (f64, f64), amplitude: f64 },
    /// Mollifier of unit mass centred at `center`, supported in `center +- width`.
    Dirac { center: f64, width: f64, amplitude: f64 },
    /// Time derivative of [`ScalarControl::Dirac`].
    DiracDerivative { center: f64, width: f64, amplitude: f64 },
}

/// `int_{-1}^{1} exp(-1/(1 - s^2)) ds`.
pub const MOLLIFIER_MASS: f64 = 0.443_993_816_168_079_4;

fn mollifier(s: f64) -> (f64, f64) {
    if s.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let q = 1.0 - s * s;
    let v = (-1.0 / q).exp() / MOLLIFIER_MASS;
    (v, v * (-2.0 * s / (q * q)))
}

impl ScalarControl {
    pub fn support(&self) -> (f64, f64) {
        match *self {
            ScalarControl::Window { support, .. } => support,
            ScalarControl::Dirac { center, width, .. } | ScalarControl::DiracDerivative { center, width, .. } => (center - width, center + width),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut c = self.clone();
        match &mut c {
            ScalarControl::Window { amplitude, .. } | ScalarControl::Dirac { amplitude, .. } | ScalarControl::DiracDerivative { amplitude, .. } => *amplitude *= s,
        }
        c
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            ScalarControl::Window { support: (a, b), amplitude } => amplitude * window((t - a) / (b - a)).0,
            ScalarControl::Dirac { center, width, amplitude } => amplitude * mollifier((t - center) / width).0 / width,
            ScalarControl::DiracDerivative { center, width, amplitude } => amplitude * mollifier((t - center) / width).1 / (width * width),
        }
    }
}

#[derive(Clone, Debug)]
enum Potential {
    /// `phi = -1/2 x^T Q(t) x f`, `Q = U / sqrt(2c)`.
    Quadratic { family: ControlFamily, scale: f64 },
    /// `phi = -u(t) x_i f`.
    Linear { control: ScalarControl, channel: usize },
}

/// Norm estimates sampled in chart coordinates.
#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct FormNorms {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

/// An exact two-form `d eta` on a tube around an orbit segment.
#[derive(Clone, Debug)]
pub struct PerturbationForm {
    potential: Potential,
    chart: FermiChart,
    delta: f64,
    profile: BumpProfile,
}

fn check_support(chart: &FermiChart, support: (f64, f64)) -> Result<()> {
    let (t0, t1) = chart.t_range();
    let tol = 1e-12 * (t1 - t0).abs().max(1.0);
    if support.0 < t0 - tol || support.1 > t1 + tol {
        return Err(Error::Invalid(format!(
            "control support [{}, {}] is not inside the chart range [{t0}, {t1}]",
            support.0, support.1
        )));
    }
    Ok(())
}

fn check_delta(chart: &FermiChart, delta: f64) -> Result<()> {
    if !(delta > 0.0) || delta > chart.delta() * (1.0 + 1e-12) {
        return Err(Error::Invalid(format!("tube radius {delta} must lie in (0, {}] where the chart embeds", chart.delta())));
    }
    Ok(())
}

/// `d eta` for the family `u` on the chart's tube: `eta = phi dx_1` with
/// `phi = -(1/(2 sqrt(2c))) sum_{k,l} u_kl x_k x_l f(|x_perp| / delta)`, so that
/// near the axis `(d eta)_{i1} = -(1/sqrt(2c)) sum_l u_il x_l`.
pub fn build_perturbation(u: &ControlFamily, chart: &FermiChart, delta: f64, profile: BumpProfile) -> Result<PerturbationForm> {
    if u.n() + 1 != chart.dim() {
        return Err(Error::Shape(format!("controls for n = {} on a chart of dimension {}", u.n(), chart.dim())));
    }
    check_delta(chart, delta)?;
    check_support(chart, u.controls().support())?;
    let scale = 1.0 / (2.0 * chart.frame().energy).sqrt();
    Ok(PerturbationForm { potential: Potential::Quadratic { family: u.clone(), scale }, chart: chart.clone(), delta, profile })
}

/// `d eta_i` with `eta_i = -u(x_1) x_i f(|x_perp| / delta) dx_1`, which equals
/// `u(x_1) dx_1 ^ dx_i` near the axis. `channel` is zero-based in `x_perp`.
pub fn variational_perturbation(control: &ScalarControl, channel: usize, chart: &FermiChart, delta: f64, profile: BumpProfile) -> Result<PerturbationForm> {
    if channel + 1 >= chart.dim() {
        return Err(Error::Invalid(format!("channel {} out of range for dimension {}", channel + 2, chart.dim())));
    }
    check_delta(chart, delta)?;
    check_support(chart, control.support())?;
    Ok(PerturbationForm { potential: Potential::Linear { control: control.clone(), channel }, chart: chart.clone(), delta, profile })
}

impl PerturbationForm {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn profile(&self) -> BumpProfile {
        self.profile
    }

    pub fn chart(&self) -> &FermiChart {
        &self.chart
    }

    pub fn support(&self) -> (f64, f64) {
        match &self.potential {
            Potential::Quadratic { family, .. } => family.controls().support(),
            Potential::Linear { control, .. } => control.support(),
        }
    }

    /// Components of `d eta` in chart coordinates at `y`.
    pub fn in_chart(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let m = y.len();
        let mut w = DMatrix::zeros(m, m);
        let t = y[0];
        let (a, b) = self.support();
        if t <= a || t >= b {
            return w;
        }
        let x = y.rows(1, m - 1).into_owned();
        let r = x.norm();
        let (f, fp, _) = self.profile.eval(r / self.delta);
        if f == 0.0 && fp == 0.0 {
            return w;
        }
        // grad f(|x| / delta)
        let grad_f = if r > 0.0 && fp != 0.0 { &x * (fp / (r * self.delta)) } else { DVector::zeros(m - 1) };
        let grad_phi = match &self.potential {
            Potential::Quadratic { family, scale } => {
                let q = family.matrix_at(t) * *scale;
                let qx = &q * &x;
                let quad = 0.5 * x.dot(&qx);
                -(qx * f) - grad_f * quad
            }
            Potential::Linear { control, channel } => {
                let u = control.value(t);
                let mut g = -(&grad_f * (u * x[*channel]));
                g[*channel] -= u * f;
                g
            }
        };
        for j in 0..m - 1 {
            w[(j + 1, 0)] = grad_phi[j];
            w[(0, j + 1)] = -grad_phi[j];
        }
        w
    }

    /// `d eta` as a form on the original chart; zero outside the tube.
    pub fn form(&self) -> ClosedTwoForm {
        let me = self.clone();
        let label = match &self.potential {
            Potential::Quadratic { .. } => "d eta (controls)".to_string(),
            Potential::Linear { channel, .. } => format!("d eta_{}", channel + 2),
        };
        self.chart.push_form(label, move |y| me.in_chart(y))
    }

    /// Sample points of the support: times across the control support, normal
    /// offsets inside the radius where `f` is non-constant and on the axis.
    fn sample_points(&self, count: usize) -> Vec<DVector<f64>> {
        let m = self.chart.dim();
        let (a, b) = self.support();
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let mut y = DVector::zeros(m);
            y[0] = a + (b - a) * halton(k + 1, PRIMES[0]);
            // radius in [0, 2 delta / 3], direction from the remaining bases
            let rad = (2.0 / 3.0) * self.delta * halton(k + 1, PRIMES[1]);
            let mut dir = DVector::zeros(m - 1);
            for j in 0..m - 1 {
                dir[j] = 2.0 * halton(k + 1, PRIMES[(2 + j) % PRIMES.len()]) - 1.0;
            }
            if dir.norm() == 0.0 {
                dir[0] = 1.0;
            }
            let dir = dir.normalize();
            for j in 0..m - 1 {
                y[j + 1] = rad * dir[j];
            }
            out.push(y);
        }
        out
    }

    /// `C^0`, `C^1` and `C^2` sizes of the components in chart coordinates,
    /// the last two by central differences.
    pub fn norms(&self, samples: usize) -> FormNorms {
        let m = self.chart.dim();
        let h = 1e-3 * self.delta;
        let mut out = FormNorms::default();
        for y in self.sample_points(samples) {
            let w0 = self.in_chart(&y);
            out.c0 = out.c0.max(w0.amax());
            for a in 0..m {
                let mut yp = y.clone();
                yp[a] += h;
                let mut ym = y.clone();
                ym[a] -= h;
                let (wp, wm) = (self.in_chart(&yp), self.in_chart(&ym));
                out.c1 = out.c1.max(((&wp - &wm) / (2.0 * h)).amax());
                out.c2 = out.c2.max(((wp - &w0 * 2.0 + wm) / (h * h)).amax());
            }
        }
        out
    }

    /// Largest `|d(d eta)|` component by fourth-order differences of the
    /// chart components on sample points; zero identically when `m = 2`.
    pub fn closedness_residual(&self, samples: usize) -> f64 {
        let m = self.chart.dim();
        if m < 3 {
            return 0.0;
        }
        let h = 1e-3 * self.delta;
        let mut worst: f64 = 0.0;
        for y in self.sample_points(samples) {
            let d = crate::geometry::fd_partials(|z| self.in_chart(z), &y, h);
            for a in 0..m {
                for b in a + 1..m {
                    for c in b + 1..m {
                        let r = d[a][(b, c)] + d[b][(c, a)] + d[c][(a, b)];
                        worst = worst.max(r.abs());
                    }
                }
            }
        }
        worst
    }

    /// Largest component on the axis `x_perp = 0`.
    pub fn axis_residual(&self, samples: usize) -> f64 {
        let m = self.chart.dim();
        let (a, b) = self.support();
        (0..samples)
            .map(|k| {
                let mut y = DVector::zeros(m);
                y[0] = a + (b - a) * (k as f64 + 0.5) / samples as f64;
                self.in_chart(&y).amax()
            })
            .fold(0.0, f64::max)
    }
}

/// Geometric radius of curvature `speed^2 / |nabla_t gamma'|` minimised over the
/// orbit, capped by the injectivity radius: a scale on which the tube embeds.
pub fn embedding_radius(sys: &MagneticSystem, orbit: &OrbitSegment) -> Result<f64> {
    let mut kappa: f64 = 0.0;
    let speed2 = 2.0 * orbit.energy;
    for s in &orbit.states {
        let acc = lorentz_unchecked(&sys.chart, &sys.form, &s.x)? * &s.v;
        let a = sys.chart.inner(&s.x, &acc, &acc).sqrt();
        kappa = kappa.max(a / speed2);
    }
    let inj = sys.chart.injectivity_radius();
    Ok(if kappa > 0.0 { inj.min(1.0 / kappa) } else { inj })
}

/// `min(embedding_radius / 2, 0.1 tau)`.
pub fn default_tube_radius(sys: &MagneticSystem, orbit: &OrbitSegment) -> Result<f64> {
    Ok((0.5 * embedding_radius(sys, orbit)?).min(0.1 * orbit.duration()))
}

/// Grid indices of the orbit covering `[a, b]` with two spare samples.
fn covering_slice(orbit: &OrbitSegment, support: (f64, f64)) -> Result<(usize, usize)> {
    let t0 = orbit.start_time();
    let last = orbit.len() - 1;
    let lo = ((support.0 - t0) / orbit.step).floor() as isize - 2;
    let hi = ((support.1 - t0) / orbit.step).ceil() as isize + 2;
    if support.0 < t0 - 1e-12 || support.1 > orbit.times[last] + 1e-12 {
        return Err(Error::OutsideGrid { time: if support.0 < t0 { support.0 } else { support.1 }, start: t0, end: orbit.times[last] });
    }
    Ok((lo.max(0) as usize, (hi.max(1) as usize).min(last)))
}

/// Smallest distance from the orbit points in `[a, b]` to the points of the
/// orbit outside `[a - margin, b + margin]`. A perturbation supported on a tube
/// thinner than this around `[a, b]` does not meet any other pass of the orbit.
pub fn isolation_distance(sys: &MagneticSystem, orbit: &OrbitSegment, support: (f64, f64), margin: f64) -> f64 {
    let mut best = f64::INFINITY;
    let inside: Vec<&DVector<f64>> = orbit.times.iter().zip(&orbit.states).filter(|(t, _)| **t >= support.0 && **t <= support.1).map(|(_, s)| &s.x).collect();
    let gap = |t: f64| {
        let d = if t < support.0 { support.0 - t } else if t > support.1 { t - support.1 } else { 0.0 };
        match orbit.period {
            // the start and the end of a closed orbit are neighbours
            Some(p) => d.min((support.0 - (t - p)).max(0.0).max((t - p) - support.1)).min((support.0 - (t + p)).max(0.0).max((t + p) - support.1)),
            None => d,
        }
    };
    for (t, s) in orbit.times.iter().zip(&orbit.states) {
        if gap(*t) <= margin {
            continue;
        }
        for x in &inside {
            best = best.min(sys.chart.displacement(x, &s.x).norm());
        }
    }
    best
}

/// Builds a Fermi chart on the part of `orbit` that covers `support`.
pub fn local_chart(sys: &MagneticSystem, orbit: &OrbitSegment, frame: &FermiFrame, support: (f64, f64), delta: f64) -> Result<FermiChart> {
    let (k0, k1) = covering_slice(orbit, support)?;
    fermi_chart(sys, &orbit.slice(k0, k1)?, &frame.slice(k0, k1)?, delta)
}

/// Flow of `Omega + extra` from the orbit's initial state on the same grid.
pub fn reintegrate(sys: &MagneticSystem, orbit: &OrbitSegment, extra: &ClosedTwoForm) -> Result<(MagneticSystem, OrbitSegment)> {
    let perturbed = sys.with_form(sys.form.sum(extra)?)?;
    let seg = integrate_steps_unchecked(&perturbed, orbit.first(), orbit.start_time(), orbit.duration(), orbit.steps())?;
    Ok((perturbed, seg))
}

/// Largest position and velocity distance between two sampled orbits.
pub fn orbit_deviation(sys: &MagneticSystem, a: &OrbitSegment, b: &OrbitSegment) -> f64 {
    a.states
        .iter()
        .zip(&b.states)
        .map(|(p, q)| sys.chart.displacement(&p.x, &q.x).norm().max((&p.v - &q.v).norm()))
        .fold(0.0, f64::max)
}

/// Sub-intervals per grid cell in the Duhamel quadrature; pulses of width
/// comparable to a few grid cells have large high derivatives.
pub const DUHAMEL_REFINE: usize = 16;

/// `S(T) int u(t) S(t)^{-1} (0, e_i) dt`, `S` the fundamental matrix from the
/// curve start. Each grid cell meeting the support of `u` is split into
/// [`DUHAMEL_REFINE`] Simpson panels, with `S` at the sub-nodes from a local
/// Magnus step. Returns `(V(T), V'(T))` in reduced coordinates.
pub fn variational_response(curve: &LinearSystemCurve, control: &ScalarControl, channel: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = curve.n();
    if channel >= n {
        return Err(Error::Invalid(format!("channel {} out of range for n = {n}", channel + 2)));
    }
    let s = propagate_all(curve, &DMatrix::identity(2 * n, 2 * n))?;
    let steps = s.len() - 1;
    let h = curve.step();
    let (a, b) = control.support();
    let sub = h / DUHAMEL_REFINE as f64;
    let w = simpson_weights(DUHAMEL_REFINE, sub);
    let j = symplectic_j(n);
    let mut forcing = DVector::zeros(2 * n);
    forcing[n + channel] = 1.0;
    let mut acc = DVector::zeros(2 * n);
    for k in 0..steps {
        let tk = curve.start() + k as f64 * h;
        if tk + h <= a || tk >= b {
            continue;
        }
        for (q, wq) in w.iter().enumerate() {
            let t = tk + q as f64 * sub;
            let u = control.value(t);
            if u == 0.0 {
                continue;
            }
            let st = if q == 0 { s[k].clone() } else { magnus_step(curve, tk, q as f64 * sub)? * &s[k] };
            let inv = -&j * st.transpose() * &j;
            acc += inv * &forcing * (wq * u);
        }
    }
    let z = &s[steps] * acc;
    Ok((z.rows(0, n).into_owned(), z.rows(n, n).into_owned()))
}

/// Finite-difference oracle for [`variational_response`]: central difference
/// in `s` of the flow of `Omega + s d eta_i` from the orbit's initial state,
/// read in reduced coordinates at the final time. The step is `h / max(1, sup|u|)`
/// so the perturbed field stays in the linear regime for peaked pulses.
#[allow(clippy::too_many_arguments)]
pub fn variational_response_fd(
    sys: &MagneticSystem,
    orbit: &OrbitSegment,
    frame: &FermiFrame,
    curve: &CurvatureCurve,
    control: &ScalarControl,
    channel: usize,
    delta: f64,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let chart = local_chart(sys, orbit, frame, control.support(), delta)?;
    let last = orbit.len() - 1;
    let (a, b) = control.support();
    let sup = (0..=400).map(|k| control.value(a + (b - a) * k as f64 / 400.0).abs()).fold(1.0, f64::max);
    let h = h / sup;
    let run = |s: f64| -> Result<OrbitSegment> {
        let form = variational_perturbation(&control.scaled(s), channel, &chart, delta, BumpProfile::Exp)?.form();
        Ok(reintegrate(sys, orbit, &form)?.1)
    };
    let plus = run(h)?;
    let minus = run(-h)?;
    let (xp, xm) = (&plus.states[last], &minus.states[last]);
    let base = &orbit.states[last];
    let dx = sys.chart.displacement(&xm.x, &xp.x) / (2.0 * h);
    let mut dv = (&xp.v - &xm.v) / (2.0 * h);
    if !sys.chart.is_flat() {
        dv += christoffels_unchecked(&sys.chart, &base.x)?.contract(&base.v, &dx);
    }
    let (_, f, fp) = reduced_coordinates(&sys.chart, frame, curve, last, &dx, &dv);
    Ok((f, fp))
}

#[derive(Clone, Debug, Serialize)]
pub struct BasisCertificate {
    pub n: usize,
    pub center: f64,
    pub lambda: f64,
    /// Columns `Z_i` from `delta_lambda` then from `delta'_lambda` channels.
    pub responses: Vec<Vec<f64>>,
    pub rank: RankInfo,
    pub pass: bool,
}

/// Responses to `amplitude * delta_lambda(t - center)` and its derivative in
/// each channel, and the rank of their span in the `2n`-dimensional transversal.
pub fn basis_variation_certificate(curve: &LinearSystemCurve, center: f64, lambda: f64, amplitude: f64) -> Result<BasisCertificate> {
    let n = curve.n();
    if !(lambda > 0.0) || center - lambda < curve.start() || center + lambda > curve.end() {
        return Err(Error::Invalid(format!("pulse at {center} with width {lambda} does not fit in [{}, {}]", curve.start(), curve.end())));
    }
    let mut cols = Vec::with_capacity(2 * n);
    for kind in 0..2 {
        for i in 0..n {
            let c = if kind == 0 {
                ScalarControl::Dirac { center, width: lambda, amplitude }
            } else {
                ScalarControl::DiracDerivative { center, width: lambda, amplitude }
            };
            let (v, vp) = variational_response(curve, &c, i)?;
            let mut z = DMatrix::zeros(2 * n, 1);
            z.view_mut((0, 0), (n, 1)).copy_from(&v);
            z.view_mut((n, 0), (n, 1)).copy_from(&vp);
            cols.push(z);
        }
    }
    let rank = rank_info(&cols);
    Ok(BasisCertificate {
        n,
        center,
        lambda,
        responses: cols.iter().map(|c| c.iter().cloned().collect()).collect(),
        pass: rank.dim == 2 * n,
        rank,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FranksOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Largest admissible `|target - W(T)|_F`.
    pub budget: f64,
    pub modes: usize,
    /// Support of the controls; the whole curve when absent.
    pub support: Option<(f64, f64)>,
    /// Relative damping used when the linearization is rank deficient.
    pub damping: f64,
}

impl Default for FranksOptions {
    fn default() -> Self {
        FranksOptions { max_iter: 50, tol: 1e-6, budget: 0.05, modes: DEFAULT_MODES, support: None, damping: 1e-6 }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual: f64,
    pub step_norm: f64,
    pub tangent_rank: usize,
    pub damped: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct FranksSolution {
    pub target: Vec<Vec<f64>>,
    pub achieved: Vec<Vec<f64>>,
    pub unperturbed: Vec<Vec<f64>>,
    /// Control-system input `w`; the form coefficients follow from
    /// [`ControlFamily::from_control_system`].
    pub controls: ControlVector,
    pub target_distance: f64,
    pub residual: f64,
    pub achieved_defect: f64,
    pub l2_norm: f64,
    pub c0_norm: f64,
    pub c2_norm: f64,
    /// Norms of the induced `d eta`, once attached.
    pub form_norms: Option<FormNorms>,
    pub iterations: Vec<IterationRecord>,
    pub levenberg_events: usize,
    pub converged: bool,
}

fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Gauss-Newton on the End-Point map from `X(start) = I` to `X(end) = target`.
/// Each step expresses the residual and the Jacobian in a basis of
/// `T_X Sp(n)` at the current endpoint, takes the minimum-norm least-squares
/// step, and falls back to a Levenberg step when the tangent Jacobian has
/// less than full rank. Steps that do not reduce the residual are halved.
pub fn franks_solve(curve: &LinearSystemCurve, target: &SymplecticMatrix, opts: &FranksOptions) -> Result<FranksSolution> {
    let n = curve.n();
    if target.n() != n {
        return Err(Error::Shape(format!("target is in Sp({}) but the curve has n = {n}", target.n())));
    }
    let t_end = curve.end();
    let support = opts.support.unwrap_or((curve.start(), t_end));
    let ident = SymplecticMatrix::identity(n);
    let mut u = ControlVector::zeros(n, opts.modes, support)?;
    let w0 = end_point(&ident, curve, &u, t_end)?;
    let target_distance = (target.entries() - w0.entries()).norm();
    if target_distance > opts.budget {
        return Err(Error::OutsideBudget { distance: target_distance, budget: opts.budget });
    }
    let basis = tangent_space_basis(n);
    let p = basis.len();
    let mut x = w0.clone();
    let mut residual = target_distance;
    let mut iterations = Vec::new();
    let mut levenberg_events = 0;
    let mut iter = 0;
    while residual > opts.tol && iter < opts.max_iter {
        iter += 1;
        let r = vec_of(&(target.entries() - x.entries()));
        let jac = end_point_jacobian(&ident, curve, &u, t_end)?;
        let tb = DMatrix::from_fn(4 * n * n, p, |row, col| (x.entries() * &basis[col]).as_slice()[row]);
        let tb_pinv = tb.clone().pseudo_inverse(1e-12).map_err(|e| Error::Singular(e.to_string()))?;
        let jt = &tb_pinv * &jac;
        let rho = &tb_pinv * &r;
        let rank = crate::linalg::numerical_rank(&jt, 1e-9);
        let damped = rank < p;
        let step = if damped {
            levenberg_events += 1;
            let mu = opts.damping * jt.norm_squared().max(f64::MIN_POSITIVE);
            let gram = &jt * jt.transpose() + DMatrix::identity(p, p) * mu;
            let y = gram.lu().solve(&rho).ok_or_else(|| Error::Singular("damped normal equations".into()))?;
            jt.transpose() * y
        } else {
            min_norm_solve(&jt, &rho, 1e-12)
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let cand = u.with_vector(&(u.as_vector() + &step * scale))?;
            let xc = end_point(&ident, curve, &cand, t_end)?;
            let rc = (target.entries() - xc.entries()).norm();
            if rc < residual {
                accepted = Some((cand, xc, rc));
                break;
            }
            scale *= 0.5;
        }
        let step_norm = step.norm() * scale;
        match accepted {
            Some((cand, xc, rc)) => {
                u = cand;
                x = xc;
                residual = rc;
            }
            None => {
                iterations.push(IterationRecord { iteration: iter, residual, step_norm: 0.0, tangent_rank: rank, damped });
                break;
            }
        }
        iterations.push(IterationRecord { iteration: iter, residual, step_norm, tangent_rank: rank, damped });
    }
    Ok(FranksSolution {
        target: rows_f64(target.entries()),
        achieved: rows_f64(x.entries()),
        unperturbed: rows_f64(w0.entries()),
        target_distance,
        residual,
        achieved_defect: x.defect(),
        l2_norm: u.l2_norm(),
        c0_norm: u.c0_norm(),
        c2_norm: u.c2_norm(),
        controls: u,
        form_norms: None,
        iterations,
        levenberg_events,
        converged: residual <= opts.tol,
    })
}

impl FranksSolution {
    /// Coefficients of the perturbation realizing this solution at energy `c`.
    pub fn family(&self, energy: f64) -> Result<ControlFamily> {
        ControlFamily::from_control_system(&self.controls, energy)
    }

    /// Builds the induced `d eta` on `chart` and records its norms.
    pub fn attach_perturbation(&mut self, chart: &FermiChart, delta: f64, profile: BumpProfile) -> Result<PerturbationForm> {
        let form = build_perturbation(&self.family(chart.frame().energy)?, chart, delta, profile)?;
        self.form_norms = Some(form.norms(200));
        Ok(form)
    }
}

/// `W exp(s J S)` at Frobenius distance `eps` from `W`, with `S` the symmetric
/// part of a standard Gaussian matrix: a sample on the sphere of radius `eps`
/// about `W` in `Sp(n)`. Returns the target and the generator `s J S`.
pub fn sphere_target(w: &SymplecticMatrix, eps: f64, rng: &mut ChaCha8Rng) -> Result<(SymplecticMatrix, DMatrix<f64>)> {
    let n = w.n();
    let g: DMatrix<f64> = DMatrix::from_fn(2 * n, 2 * n, |_, _| StandardNormal.sample(rng));
    let s = (&g + g.transpose()) * 0.5;
    let gen = symplectic_j(n) * s;
    if eps == 0.0 {
        return Ok((w.clone(), DMatrix::zeros(2 * n, 2 * n)));
    }
    let dist = |a: f64| (w.entries() * (&gen * a).exp() - w.entries()).norm();
    // the distance is increasing near 0: secant iteration from the linear guess
    let mut a0 = 0.0;
    let mut d0 = -eps;
    let mut a1 = eps / (w.entries() * &gen).norm();
    let mut d1 = dist(a1) - eps;
    for _ in 0..60 {
        if d1.abs() <= 1e-14 * eps || d1 == d0 {
            break;
        }
        let a2 = a1 - d1 * (a1 - a0) / (d1 - d0);
        a0 = a1;
        d0 = d1;
        a1 = a2;
        d1 = dist(a1) - eps;
    }
    let gen = gen * a1;
    Ok((SymplecticMatrix::new(w.entries() * gen.exp())?, gen))
}

#[derive(Clone, Debug, Serialize)]
pub struct BallScan {
    pub eps: f64,
    pub samples: usize,
    pub seed: u64,
    pub successes: usize,
    pub success_rate: f64,
    pub max_residual: f64,
    pub max_u_l2: f64,
    pub max_u_c2: f64,
    /// `max |u|_{C^2} / eps^{1/2}`.
    pub k_fit: f64,
    pub max_iterations: usize,
    pub levenberg_events: usize,
    pub failures: Vec<String>,
}

/// Runs [`franks_solve`] on `samples` targets from [`sphere_target`] about the
/// unperturbed endpoint.
pub fn franks_ball_scan(curve: &LinearSystemCurve, eps: f64, samples: usize, seed: u64, opts: &FranksOptions) -> Result<BallScan> {
    let n = curve.n();
    let support = opts.support.unwrap_or((curve.start(), curve.end()));
    let w = end_point(&SymplecticMatrix::identity(n), curve, &ControlVector::zeros(n, opts.modes, support)?, curve.end())?;
    if eps > opts.budget {
        return Err(Error::OutsideBudget { distance: eps, budget: opts.budget });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scan = BallScan {
        eps,
        samples,
        seed,
        successes: 0,
        success_rate: 0.0,
        max_residual: 0.0,
        max_u_l2: 0.0,
        max_u_c2: 0.0,
        k_fit: 0.0,
        max_iterations: 0,
        levenberg_events: 0,
        failures: Vec::new(),
    };
    for k in 0..samples {
        let (target, _) = sphere_target(&w, eps, &mut rng)?;
        let sol = franks_solve(curve, &target, opts)?;
        scan.max_residual = scan.max_residual.max(sol.residual);
        scan.max_u_l2 = scan.max_u_l2.max(sol.l2_norm);
        scan.max_u_c2 = scan.max_u_c2.max(sol.c2_norm);
        scan.max_iterations = scan.max_iterations.max(sol.iterations.len());
        scan.levenberg_events += sol.levenberg_events;
        if sol.converged {
            scan.successes += 1;
        } else {
            scan.failures.push(format!("target {k}: residual {:e} after {} iterations", sol.residual, sol.iterations.len()));
        }
    }
    scan.success_rate = if samples == 0 { 1.0 } else { scan.successes as f64 / samples as f64 };
    scan.k_fit = if eps > 0.0 { scan.max_u_c2 / eps.sqrt() } else { 0.0 };
    Ok(scan)
}

#[derive(Clone, Debug, Serialize)]
pub struct NormScaling {
    pub eps: Vec<f64>,
    /// Mean `|u|_{L^2}` per radius.
    pub mean_l2: Vec<f64>,
    /// Least-squares slope of `log |u|` against `log eps`.
    pub slope: f64,
}

/// The same `samples` target directions at each radius, solved, and the fitted
/// log-log slope of the control norm.
pub fn norm_scaling(curve: &LinearSystemCurve, radii: &[f64], samples: usize, seed: u64, opts: &FranksOptions) -> Result<NormScaling> {
    let mut mean_l2 = Vec::with_capacity(radii.len());
    for &eps in radii {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = curve.n();
        let support = opts.support.unwrap_or((curve.start(), curve.end()));
        let w = end_point(&SymplecticMatrix::identity(n), curve, &ControlVector::zeros(n, opts.modes, support)?, curve.end())?;
        let mut acc = 0.0;
        for _ in 0..samples {
            let (target, _) = sphere_target(&w, eps, &mut rng)?;
            let sol = franks_solve(curve, &target, opts)?;
            if !sol.converged {
                return Err(Error::NoConvergence { what: "franks solve", iterations: sol.iterations.len(), residual: sol.residual });
            }
            acc += sol.l2_norm;
        }
        mean_l2.push(acc / samples.max(1) as f64);
    }
    let xs: Vec<f64> = radii.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = mean_l2.iter().map(|e| e.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(NormScaling { eps: radii.to_vec(), mean_l2, slope: sxy / sxx })
}

#[derive(Clone, Debug, Serialize)]
pub struct MultiLegSolution {
    pub legs: Vec<FranksSolution>,
    pub supports: Vec<(f64, f64)>,
    pub composed: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub residual: f64,
    pub converged: bool,
}

/// Splits the curve into `legs` pieces of equal length and steers the product
/// of the per-leg endpoints to `W(T) exp(generator)`. Leg `k` receives the
/// target `W_k P_k exp(generator / l) P_k^{-1}` with `P_k` the product of the
/// earlier unperturbed legs, so the legs compose exactly to the target. Each
/// leg's controls live on its own interval shrunk by `gap / 2` at each end.
pub fn franks_multi_leg(curve: &LinearSystemCurve, legs: usize, generator: &DMatrix<f64>, gap: f64, opts: &FranksOptions) -> Result<MultiLegSolution> {
    let n = curve.n();
    let steps = curve.len() - 1;
    if legs == 0 || steps < 2 * legs {
        return Err(Error::Invalid(format!("cannot split {steps} steps into {legs} legs")));
    }
    let ident = SymplecticMatrix::identity(n);
    let share = (generator / legs as f64).exp();
    let mut prefix = DMatrix::identity(2 * n, 2 * n);
    let mut composed = DMatrix::identity(2 * n, 2 * n);
    let mut out = Vec::with_capacity(legs);
    let mut supports = Vec::with_capacity(legs);
    for k in 0..legs {
        let k0 = k * steps / legs;
        let k1 = (k + 1) * steps / legs;
        let leg = curve.slice(k0, k1)?;
        let support = (leg.start() + 0.5 * gap, leg.end() - 0.5 * gap);
        if !(support.1 > support.0) {
            return Err(Error::Invalid(format!("gap {gap} leaves no room for controls on leg {k}")));
        }
        let leg_opts = FranksOptions { support: Some(support), ..opts.clone() };
        let wk = end_point(&ident, &leg, &ControlVector::zeros(n, opts.modes, support)?, leg.end())?;
        let pinv = SymplecticMatrix::new(prefix.clone())?.inverse();
        let target = SymplecticMatrix::new(wk.entries() * &prefix * &share * pinv.entries())?;
        let sol = franks_solve(&leg, &target, &leg_opts)?;
        let achieved = DMatrix::from_fn(2 * n, 2 * n, |r, c| sol.achieved[r][c]);
        composed = achieved * composed;
        prefix = wk.entries() * prefix;
        supports.push(support);
        out.push(sol);
    }
    let full_target = &prefix * generator.exp();
    let residual = (&composed - &full_target).norm();
    Ok(MultiLegSolution {
        converged: out.iter().all(|s| s.converged),
        legs: out,
        supports,
        composed: rows_f64(&composed),
        target: rows_f64(&full_target),
        residual,
    })
}

/// Smallest distance between orbit points lying in different supports; the
/// tubes of radius `2 delta / 3` around them are disjoint when this exceeds
/// `4 delta / 3`.
pub fn support_separation(sys: &MagneticSystem, orbit: &OrbitSegment, supports: &[(f64, f64)]) -> f64 {
    let groups: Vec<Vec<&DVector<f64>>> = supports
        .iter()
        .map(|&(a, b)| orbit.times.iter().zip(&orbit.states).filter(|(t, _)| **t >= a && **t <= b).map(|(_, s)| &s.x).collect())
        .collect();
    let mut best = f64::INFINITY;
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            for p in &groups[i] {
                for q in &groups[j] {
                    best = best.min(sys.chart.displacement(p, q).norm());
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bump_thresholds_and_derivatives() {
        for p in [BumpProfile::Exp, BumpProfile::Quintic] {
            assert_eq!(p.eval(0.0).0, 1.0);
            assert_eq!(p.eval(1.0 / 3.0).0, 1.0);
            assert_eq!(p.eval(2.0 / 3.0).0, 0.0);
            assert_eq!(p.eval(5.0).0, 0.0);
            let h = 1e-6;
            for &l in &[0.4, 0.5, 0.6] {
                let (f, d1, d2) = p.eval(l);
                assert!((0.0..=1.0).contains(&f));
                assert_relative_eq!(d1, (p.eval(l + h).0 - p.eval(l - h).0) / (2.0 * h), epsilon = 1e-5);
                assert_relative_eq!(d2, (p.eval(l + h).1 - p.eval(l - h).1) / (2.0 * h), epsilon = 1e-4);
            }
        }
        assert_relative_eq!(BumpProfile::Exp.eval(0.5).0, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn mollifier_has_unit_mass() {
        let c = ScalarControl::Dirac { center: 0.0, width: 0.3, amplitude: 1.0 };
        let n = 4000;
        let w = simpson_weights(n, 0.6 / n as f64);
        let mass: f64 = (0..=n).map(|k| w[k] * c.value(-0.3 + 0.6 * k as f64 / n as f64)).sum();
        assert_relative_eq!(mass, 1.0, epsilon = 1e-10);
        let d = ScalarControl::DiracDerivative { center: 0.0, width: 0.3, amplitude: 1.0 };
        let h = 1e-6;
        assert_relative_eq!(d.value(0.1), (c.value(0.1 + h) - c.value(0.1 - h)) / (2.0 * h), epsilon = 1e-4);
    }

    #[test]
    fn family_scaling_matches_control_basis() {
        let mut c = DMatrix::zeros(3, 1);
        c[(0, 0)] = 1.0;
        c[(1, 0)] = 2.0;
        c[(2, 0)] = 3.0;
        let w = ControlVector::from_coefficients(2, (0.0, 1.0), c).unwrap();
        let energy = 0.7;
        let fam = ControlFamily::from_control_system(&w, energy).unwrap();
        let b = ControlBasis::new(2);
        for &t in &[0.2, 0.5, 0.9] {
            let lhs = curvature_shift(&fam, energy, t);
            let rhs = b.symmetric_combination(&w.values(t));
            assert!((lhs - rhs).amax() < 1e-14);
        }
    }

    #[test]
    fn free_response_closed_form() {
        let tt = 2.0;
        let curve = LinearSystemCurve::constant(DMatrix::zeros(1, 1), tt, 1e-3).unwrap();
        let (a, b) = (0.5, 1.5);
        let c = ScalarControl::Window { support: (a, b), amplitude: 1.0 };
        let (v, vp) = variational_response(&curve, &c, 0).unwrap();
        let n = 20000;
        let w = simpson_weights(n, 1.0 / n as f64);
        let mass: f64 = (0..=n).map(|k| w[k] * window(k as f64 / n as f64).0).sum::<f64>() * (b - a);
        assert_relative_eq!(vp[0], mass, epsilon = 1e-9);
        assert_relative_eq!(v[0], (tt - 0.5 * (a + b)) * mass, epsilon = 1e-9);
        let zero = c.scaled(0.0);
        let (v0, vp0) = variational_response(&curve, &zero, 0).unwrap();
        assert_eq!((v0[0], vp0[0]), (0.0, 0.0));
    }

    #[test]
    fn dirac_responses_approach_fundamental_columns() {
        let curve = LinearSystemCurve::from_fn(1, 0.0, 2.0, 1e-3, |t| DMatrix::from_element(1, 1, 1.0 + 0.3 * t.sin())).unwrap();
        let s = propagate_all(&curve, &DMatrix::identity(2, 2)).unwrap();
        let t0 = 0.8;
        let k0 = 800;
        let st = &s[s.len() - 1];
        let j = symplectic_j(1);
        let inv0 = -&j * s[k0].transpose() * &j;
        let cols = st * inv0;
        let mut last_err = f64::INFINITY;
        for &lambda in &[0.2, 0.1, 0.05] {
            let (v, vp) = variational_response(&curve, &ScalarControl::Dirac { center: t0, width: lambda, amplitude: 1.0 }, 0).unwrap();
            let err = (v[0] - cols[(0, 1)]).abs() + (vp[0] - cols[(1, 1)]).abs();
            assert!(err < last_err);
            last_err = err;
            let (d, dp) = variational_response(&curve, &ScalarControl::DiracDerivative { center: t0, width: lambda, amplitude: 1.0 }, 0).unwrap();
            // int delta' S^{-1}(0, e) = S(t0)^{-1}(e, 0)
            let e2 = (d[0] - cols[(0, 0)]).abs() + (dp[0] - cols[(1, 0)]).abs();
            assert!(e2 < 0.05, "{e2}");
        }
        assert!(last_err < 5e-3);
        let cert = basis_variation_certificate(&curve, t0, 0.05, 1.0).unwrap();
        assert!(cert.pass);
        assert_eq!(basis_variation_certificate(&curve, t0, 0.05, 0.0).unwrap().rank.dim, 0);
    }

    #[test]
    fn franks_trivial_target() {
        let curve = LinearSystemCurve::constant(DMatrix::identity(1, 1), 0.2, 1e-3).unwrap();
        let w = end_point(&SymplecticMatrix::identity(1), &curve, &ControlVector::zeros(1, 8, (0.0, 0.2)).unwrap(), 0.2).unwrap();
        let sol = franks_solve(&curve, &w, &FranksOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations.is_empty());
        assert_eq!(sol.l2_norm, 0.0);
    }

    #[test]
    fn franks_small_target_converges() {
        let curve = LinearSystemCurve::constant(DMatrix::identity(1, 1), 0.2, 1e-3).unwrap();
        let w = end_point(&SymplecticMatrix::identity(1), &curve, &ControlVector::zeros(1, 8, (0.0, 0.2)).unwrap(), 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (target, _) = sphere_target(&w, 1e-3, &mut rng).unwrap();
        assert_relative_eq!((target.entries() - w.entries()).norm(), 1e-3, epsilon = 1e-12);
        let sol = franks_solve(&curve, &target, &FranksOptions::default()).unwrap();
        assert!(sol.converged, "{:?}", sol.iterations);
        assert!(sol.achieved_defect < 1e-8);
        let far = sphere_target(&w, 1.0, &mut rng).unwrap().0;
        assert!(matches!(franks_solve(&curve, &far, &FranksOptions::default()), Err(Error::OutsideBudget { .. })));
    }

    #[test]
    fn zero_radius_scan() {
        let curve = LinearSystemCurve::constant(DMatrix::identity(1, 1), 0.2, 1e-3).unwrap();
        let scan = franks_ball_scan(&curve, 0.0, 5, 1, &FranksOptions::default()).unwrap();
        assert_eq!((scan.success_rate, scan.max_u_l2), (1.0, 0.0));
    }
}
