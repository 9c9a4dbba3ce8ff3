//! The reduced linearized flow `W' = A(t) W`, `A = [[0, I], [-K, 0]]`, its
//! monodromy and classification, and a finite-difference oracle for the
//! linearized Poincare map obtained directly from the flow.

use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{integrate_steps_unchecked, MagneticSystem, OrbitSegment, PhaseState};
use crate::frame::{jacobi_initial_data, reduced_coordinates, Assembly, CurvatureCurve, FermiFrame, SampledJacobiField};
use crate::geometry::christoffels_unchecked;
use crate::linalg::{column_space, commutator, matrix_sign, symplectic_defect, symplectic_j};

pub const SYMPLECTIC_TOL: f64 = 1e-8;
pub const CLASSIFY_TOL: f64 = 1e-6;
pub const CLASSIFY_K_MAX: usize = 8;

/// A `2n x 2n` matrix checked to preserve the standard symplectic form.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SymplecticMatrix {
    n: usize,
    entries: DMatrix<f64>,
}

impl SymplecticMatrix {
    /// Accepts `m` when `|m^T J m - J|_F <= 1e-8`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(m, SYMPLECTIC_TOL)
    }

    pub fn with_tolerance(m: DMatrix<f64>, tol: f64) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() % 2 != 0 || m.nrows() == 0 {
            return Err(Error::Shape(format!("expected an even square matrix, got {}x{}", m.nrows(), m.ncols())));
        }
        let d = symplectic_defect(&m);
        if !(d <= tol) {
            return Err(Error::Invalid(format!("symplectic defect {d:e} exceeds {tol:e}")));
        }
        Ok(SymplecticMatrix { n: m.nrows() / 2, entries: m })
    }

    pub fn identity(n: usize) -> Self {
        SymplecticMatrix { n, entries: DMatrix::identity(2 * n, 2 * n) }
    }

    /// `exp(J S)` for symmetric `S`, which is always symplectic.
    pub fn from_hamiltonian(s: &DMatrix<f64>) -> Result<Self> {
        let n = s.nrows() / 2;
        let sym = (s + s.transpose()) * 0.5;
        Self::with_tolerance((symplectic_j(n) * sym).exp(), 1e-6 * (1.0 + s.norm()).powi(2))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn defect(&self) -> f64 {
        symplectic_defect(&self.entries)
    }

    pub fn inverse(&self) -> SymplecticMatrix {
        let j = symplectic_j(self.n);
        SymplecticMatrix { n: self.n, entries: -&j * self.entries.transpose() * &j }
    }

    pub fn compose(&self, other: &SymplecticMatrix) -> SymplecticMatrix {
        SymplecticMatrix { n: self.n, entries: &self.entries * &other.entries }
    }

    /// `S^{-1} P S`.
    pub fn conjugate_by(&self, s: &SymplecticMatrix) -> SymplecticMatrix {
        s.inverse().compose(self).compose(s)
    }

    /// Eigenvalues sorted by modulus, then argument.
    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        sorted_eigenvalues(&self.entries)
    }
}

fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let mut ev: Vec<Complex<f64>> = m.clone().schur().complex_eigenvalues().iter().cloned().collect();
    ev.sort_by(|a, b| {
        a.norm()
            .partial_cmp(&b.norm())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.arg().partial_cmp(&b.arg()).unwrap_or(std::cmp::Ordering::Equal))
    });
    ev
}

pub type CurvatureFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// Samples of `K` on a uniform grid, optionally backed by a closed form used
/// between grid points.
#[derive(Clone)]
pub struct LinearSystemCurve {
    n: usize,
    t0: f64,
    step: f64,
    k: Vec<DMatrix<f64>>,
    exact: Option<CurvatureFn>,
    closing_rotation: Option<DMatrix<f64>>,
}

impl std::fmt::Debug for LinearSystemCurve {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearSystemCurve")
            .field("n", &self.n)
            .field("t0", &self.t0)
            .field("step", &self.step)
            .field("samples", &self.k.len())
            .field("exact", &self.exact.is_some())
            .finish()
    }
}

impl LinearSystemCurve {
    pub fn from_curvature(curve: &CurvatureCurve) -> Self {
        LinearSystemCurve {
            n: curve.n(),
            t0: curve.times[0],
            step: curve.step,
            k: curve.k.clone(),
            exact: None,
            closing_rotation: curve.closing_rotation.clone(),
        }
    }

    pub fn from_samples(t0: f64, step: f64, k: Vec<DMatrix<f64>>) -> Result<Self> {
        if k.len() < 2 || !(step > 0.0) {
            return Err(Error::Invalid("a curve needs at least two samples and a positive step".into()));
        }
        let n = k[0].nrows();
        if k.iter().any(|m| m.nrows() != n || m.ncols() != n) {
            return Err(Error::Shape("curvature samples must all be n x n".into()));
        }
        Ok(LinearSystemCurve { n, t0, step, k, exact: None, closing_rotation: None })
    }

    /// Samples `f` on `[t0, t1]` with about `step` spacing and keeps `f` for
    /// evaluation off the grid.
    pub fn from_fn<F>(n: usize, t0: f64, t1: f64, step: f64, f: F) -> Result<Self>
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        if !(t1 > t0) || !(step > 0.0) {
            return Err(Error::Invalid("need t1 > t0 and a positive step".into()));
        }
        let steps = crate::flow::step_count(t1 - t0, step);
        let h = (t1 - t0) / steps as f64;
        let k: Vec<DMatrix<f64>> = (0..=steps).map(|i| f(t0 + i as f64 * h)).collect();
        if k.iter().any(|m| m.nrows() != n || m.ncols() != n) {
            return Err(Error::Shape("curvature function must return n x n matrices".into()));
        }
        Ok(LinearSystemCurve { n, t0, step: h, k, exact: Some(Arc::new(f)), closing_rotation: None })
    }

    pub fn constant(k: DMatrix<f64>, duration: f64, step: f64) -> Result<Self> {
        let n = k.nrows();
        Self::from_fn(n, 0.0, duration, step, move |_| k.clone())
    }

    /// Grid samples `k0..=k1` as a curve of their own; the closed form, if
    /// any, is kept.
    pub fn slice(&self, k0: usize, k1: usize) -> Result<Self> {
        if k0 >= k1 || k1 >= self.k.len() {
            return Err(Error::Invalid(format!("bad slice {k0}..={k1} of {} samples", self.k.len())));
        }
        Ok(LinearSystemCurve {
            n: self.n,
            t0: self.t0 + k0 as f64 * self.step,
            step: self.step,
            k: self.k[k0..=k1].to_vec(),
            exact: self.exact.clone(),
            closing_rotation: None,
        })
    }

    pub fn with_closing_rotation(mut self, o: Option<DMatrix<f64>>) -> Self {
        self.closing_rotation = o;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn start(&self) -> f64 {
        self.t0
    }

    pub fn end(&self) -> f64 {
        self.t0 + (self.k.len() - 1) as f64 * self.step
    }

    pub fn samples(&self) -> &[DMatrix<f64>] {
        &self.k
    }

    pub fn closing_rotation(&self) -> Option<&DMatrix<f64>> {
        self.closing_rotation.as_ref()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let tol = 1e-9 * self.step;
        if t < self.t0 - tol || t > self.end() + tol {
            return Err(Error::OutsideGrid { time: t, start: self.t0, end: self.end() });
        }
        Ok(())
    }

    pub fn k_at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.check_time(t)?;
        Ok(match &self.exact {
            Some(f) => f(t),
            None => crate::linalg::lagrange_uniform(self.t0, self.step, &self.k, t),
        })
    }

    pub fn a_at(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(hamiltonian_block(&self.k_at(t)?))
    }

    /// Largest `|JA - (JA)^T|` over the grid samples.
    pub fn symmetry_defect(&self) -> f64 {
        let j = symplectic_j(self.n);
        self.k
            .iter()
            .map(|k| {
                let ja = &j * hamiltonian_block(k);
                (&ja - ja.transpose()).amax()
            })
            .fold(0.0, f64::max)
    }
}

/// `[[0, I], [-K, 0]]`.
pub fn hamiltonian_block(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        a[(i, n + i)] = 1.0;
    }
    a.view_mut((n, 0), (n, n)).copy_from(&(-k));
    a
}

pub(crate) fn magnus_step(curve: &LinearSystemCurve, t: f64, h: f64) -> Result<DMatrix<f64>> {
    let r = 3f64.sqrt() / 6.0;
    let a1 = curve.a_at(t + (0.5 - r) * h)?;
    let a2 = curve.a_at(t + (0.5 + r) * h)?;
    let om = (&a1 + &a2) * (0.5 * h) + commutator(&a2, &a1) * (3f64.sqrt() / 12.0 * h * h);
    Ok(om.exp())
}

/// `W(t)` for `W' = A W`, `W(t0) = W0`, by the fourth-order Magnus method on
/// the curve's grid. Each step is the exponential of a Hamiltonian matrix,
/// so symplectic input stays symplectic up to rounding.
pub fn propagate(curve: &LinearSystemCurve, w0: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    curve.check_time(t)?;
    if w0.nrows() != 2 * curve.n {
        return Err(Error::Shape(format!("W0 must have {} rows", 2 * curve.n)));
    }
    let span = (t - curve.t0).max(0.0);
    if span == 0.0 {
        return Ok(w0.clone());
    }
    let ratio = span / curve.step;
    let steps = if (ratio - ratio.round()).abs() < 1e-9 { ratio.round() as usize } else { ratio.ceil() as usize }.max(1);
    let h = span / steps as f64;
    let mut w = w0.clone();
    for i in 0..steps {
        w = magnus_step(curve, curve.t0 + i as f64 * h, h)? * w;
    }
    Ok(w)
}

/// `W(t_k)` at every grid point.
pub fn propagate_all(curve: &LinearSystemCurve, w0: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    let mut out = Vec::with_capacity(curve.len());
    let mut w = w0.clone();
    out.push(w.clone());
    for i in 0..curve.len() - 1 {
        w = magnus_step(curve, curve.t0 + i as f64 * curve.step, curve.step)? * w;
        out.push(w.clone());
    }
    Ok(out)
}

fn block_rotation(o: &DMatrix<f64>) -> DMatrix<f64> {
    let n = o.nrows();
    let mut r = DMatrix::zeros(2 * n, 2 * n);
    r.view_mut((0, 0), (n, n)).copy_from(o);
    r.view_mut((n, n), (n, n)).copy_from(o);
    r
}

/// Monodromy of the reduced system over the period, expressed in the frame at
/// `t = 0`: `diag(O, O) W(T)`.
pub fn linearized_poincare(orbit: &OrbitSegment, curve: &LinearSystemCurve) -> Result<SymplecticMatrix> {
    let period = orbit
        .period
        .ok_or_else(|| Error::Invalid("linearized Poincare map needs a periodic orbit".into()))?;
    if (curve.end() - curve.start() - period).abs() > 1e-9 * period.max(1.0) {
        return Err(Error::Shape(format!(
            "curve spans {} but the period is {period}",
            curve.end() - curve.start()
        )));
    }
    let n = curve.n;
    let mut w = propagate(curve, &DMatrix::identity(2 * n, 2 * n), curve.end())?;
    if let Some(o) = &curve.closing_rotation {
        w = block_rotation(o) * w;
    }
    SymplecticMatrix::new(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OrbitLabel {
    Hyperbolic,
    Elliptic,
    Degenerate,
    Mixed,
}

impl OrbitLabel {
    pub fn name(&self) -> &'static str {
        match self {
            OrbitLabel::Hyperbolic => "hyperbolic",
            OrbitLabel::Elliptic => "elliptic",
            OrbitLabel::Degenerate => "degenerate",
            OrbitLabel::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassificationResiduals {
    pub symplectic_defect: f64,
    /// Largest distance from `1/lambda` to the spectrum.
    pub reciprocity: f64,
    /// Largest distance from `conj(lambda)` to the spectrum.
    pub conjugation: f64,
    pub determinant_defect: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OrbitClassification {
    pub eigenvalues: Vec<[f64; 2]>,
    pub label: OrbitLabel,
    pub order: Option<usize>,
    pub tol: f64,
    pub k_max: usize,
    pub residuals: ClassificationResiduals,
}

fn closest(ev: &[Complex<f64>], z: Complex<f64>) -> f64 {
    ev.iter().map(|w| (w - z).norm()).fold(f64::INFINITY, f64::min)
}

/// Largest distance from `1/lambda` and from `conj(lambda)` to the spectrum.
pub fn spectrum_symmetry(ev: &[Complex<f64>]) -> (f64, f64) {
    let mut recip: f64 = 0.0;
    let mut conj: f64 = 0.0;
    for z in ev {
        if z.norm() > 0.0 {
            recip = recip.max(closest(ev, z.inv()));
        }
        conj = conj.max(closest(ev, z.conj()));
    }
    (recip, conj)
}

/// Smallest `k <= k_max` such that `z` lies within `tol` of a `k`-th root of unity.
pub fn root_of_unity_order(z: Complex<f64>, tol: f64, k_max: usize) -> Option<usize> {
    (1..=k_max).find(|&k| {
        (0..k).any(|p| {
            let ang = 2.0 * std::f64::consts::PI * p as f64 / k as f64;
            (z - Complex::new(ang.cos(), ang.sin())).norm() <= tol
        })
    })
}

/// Labels `P` from its spectrum. An eigenvalue within `tol` of a root of
/// unity of order at most `k_max` makes the orbit degenerate; otherwise the
/// distances `||lambda| - 1|` decide between the other labels.
pub fn classify(p: &SymplecticMatrix, tol: f64, k_max: usize) -> OrbitClassification {
    let ev = p.eigenvalues();
    let order = ev.iter().filter_map(|&z| root_of_unity_order(z, tol, k_max)).min();
    let off = ev.iter().filter(|z| (z.norm() - 1.0).abs() > tol).count();
    let label = if order.is_some() {
        OrbitLabel::Degenerate
    } else if off == ev.len() {
        OrbitLabel::Hyperbolic
    } else if off == 0 {
        OrbitLabel::Elliptic
    } else {
        OrbitLabel::Mixed
    };
    let (reciprocity, conjugation) = spectrum_symmetry(&ev);
    OrbitClassification {
        eigenvalues: ev.iter().map(|z| [z.re, z.im]).collect(),
        label,
        order,
        tol,
        k_max,
        residuals: ClassificationResiduals {
            symplectic_defect: p.defect(),
            reciprocity,
            conjugation,
            determinant_defect: (p.entries.determinant() - 1.0).abs(),
        },
    }
}

/// `classify` with tolerance `1e-6` and `k_max = 8`.
pub fn classify_default(p: &SymplecticMatrix) -> OrbitClassification {
    classify(p, CLASSIFY_TOL, CLASSIFY_K_MAX)
}

fn perturbed_start(sys: &MagneticSystem, base: &PhaseState, dx: &DVector<f64>, dv_cov: &DVector<f64>, s: f64) -> Result<PhaseState> {
    let dv = if sys.chart.is_flat() {
        dv_cov.clone()
    } else {
        dv_cov - christoffels_unchecked(&sys.chart, &base.x)?.contract(&base.v, dx)
    };
    let x = &base.x + dx * s;
    let v = &base.v + dv * s;
    let c = sys.energy(base);
    let n2 = sys.chart.inner(&x, &v, &v);
    Ok(PhaseState::new(x, v * (2.0 * c / n2).sqrt()))
}

/// Jacobi field of the flow through `orbit` with initial data `(J, J')`,
/// obtained by central differences of perturbed trajectories with parameter
/// `h`. Initial velocities are rescaled onto the energy level.
pub fn fd_jacobi_field(sys: &MagneticSystem, orbit: &OrbitSegment, j0: &DVector<f64>, jp0: &DVector<f64>, h: f64) -> Result<SampledJacobiField> {
    let base = orbit.first();
    let plus = integrate_steps_unchecked(sys, &perturbed_start(sys, base, j0, jp0, h)?, orbit.start_time(), orbit.duration(), orbit.steps())?;
    let minus = integrate_steps_unchecked(sys, &perturbed_start(sys, base, j0, jp0, -h)?, orbit.start_time(), orbit.duration(), orbit.steps())?;
    let mut j = Vec::with_capacity(orbit.len());
    let mut jp = Vec::with_capacity(orbit.len());
    for (k, st) in orbit.states.iter().enumerate() {
        let dx = sys.chart.displacement(&minus.states[k].x, &plus.states[k].x) / (2.0 * h);
        let dv = (&plus.states[k].v - &minus.states[k].v) / (2.0 * h);
        let cov = if sys.chart.is_flat() {
            dv
        } else {
            dv + christoffels_unchecked(&sys.chart, &st.x)?.contract(&st.v, &dx)
        };
        j.push(dx);
        jp.push(cov);
    }
    Ok(SampledJacobiField { j, jp })
}

#[derive(Clone, Debug, Serialize)]
pub struct FdLinearization {
    pub matrix: DMatrix<f64>,
    pub h: f64,
    /// Size of the Richardson correction, a proxy for the oracle error.
    pub noise: f64,
    pub symplectic_defect: f64,
    pub warning: Option<String>,
}

impl FdLinearization {
    pub fn to_symplectic(&self) -> Result<SymplecticMatrix> {
        SymplecticMatrix::with_tolerance(self.matrix.clone(), 1e-5)
    }
}

fn fd_monodromy(sys: &MagneticSystem, orbit: &OrbitSegment, frame: &FermiFrame, curve: &CurvatureCurve, h: f64) -> Result<DMatrix<f64>> {
    let n = curve.n();
    let last = orbit.len() - 1;
    let base = orbit.first();
    let end = orbit.last();
    let rot = frame.closing_rotation.as_ref().map(block_rotation);
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for col in 0..2 * n {
        let mut f = DVector::zeros(n);
        let mut fp = DVector::zeros(n);
        if col < n {
            f[col] = 1.0;
        } else {
            fp[col - n] = 1.0;
        }
        let (j0, jp0) = jacobi_initial_data(frame, curve, 0, &f, &fp);
        let plus = integrate_steps_unchecked(sys, &perturbed_start(sys, base, &j0, &jp0, h)?, orbit.start_time(), orbit.duration(), orbit.steps())?;
        let minus = integrate_steps_unchecked(sys, &perturbed_start(sys, base, &j0, &jp0, -h)?, orbit.start_time(), orbit.duration(), orbit.steps())?;
        let (xp, xm) = (plus.last(), minus.last());
        let dx = sys.chart.displacement(&xm.x, &xp.x) / (2.0 * h);
        let dv = (&xp.v - &xm.v) / (2.0 * h);
        let jp = if sys.chart.is_flat() {
            dv
        } else {
            dv + christoffels_unchecked(&sys.chart, &end.x)?.contract(&end.v, &dx)
        };
        let (_, fe, fpe) = reduced_coordinates(&sys.chart, frame, curve, last, &dx, &jp);
        let mut column = DVector::zeros(2 * n);
        column.rows_mut(0, n).copy_from(&fe);
        column.rows_mut(n, n).copy_from(&fpe);
        if let Some(r) = &rot {
            column = r * column;
        }
        out.set_column(col, &column);
    }
    Ok(out)
}

/// Central differences of the time-`T` flow in the reduced coordinates, with
/// one Richardson level. `h_fd = None` uses `1e-5 * max(1, |gamma'|)`.
pub fn fd_linearization(sys: &MagneticSystem, orbit: &OrbitSegment, frame: &FermiFrame, curve: &CurvatureCurve, h_fd: Option<f64>) -> Result<FdLinearization> {
    if sys.dim() < 2 {
        return Err(Error::Invalid("the reduced flow needs dimension at least 2".into()));
    }
    let h = h_fd.unwrap_or(1e-5 * orbit.speed().max(1.0));
    if !(h > 0.0) {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let coarse = fd_monodromy(sys, orbit, frame, curve, h)?;
    let fine = fd_monodromy(sys, orbit, frame, curve, h / 2.0)?;
    let matrix = (&fine * 4.0 - &coarse) / 3.0;
    let noise = (&matrix - &fine).amax();
    let warning = (noise > 1e-5).then(|| format!("finite-difference noise {noise:e} exceeds 1e-5; the oracle is poorly conditioned"));
    Ok(FdLinearization { symplectic_defect: symplectic_defect(&matrix), matrix, h, noise, warning })
}

/// `|P - F|_F / max(1, |F|_F)`.
pub fn relative_error(p: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (p - reference).norm() / reference.norm().max(1.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct AssemblyVerdict {
    pub assembly: Assembly,
    pub relative_error: f64,
}

/// Monodromy of each curvature assembly compared with the flow oracle, sorted
/// so that the best agreement comes first.
pub fn adjudicate_assemblies(orbit: &OrbitSegment, curve: &CurvatureCurve, oracle: &DMatrix<f64>) -> Result<Vec<AssemblyVerdict>> {
    let mut out = Vec::new();
    for a in Assembly::ALL {
        let lin = LinearSystemCurve::from_curvature(&curve.with_assembly(a));
        let n = lin.n();
        let mut w = propagate(&lin, &DMatrix::identity(2 * n, 2 * n), lin.end())?;
        if orbit.period.is_some() {
            if let Some(o) = lin.closing_rotation() {
                w = block_rotation(o) * w;
            }
        }
        out.push(AssemblyVerdict { assembly: a, relative_error: relative_error(&w, oracle) });
    }
    out.sort_by(|x, y| x.relative_error.partial_cmp(&y.relative_error).unwrap_or(std::cmp::Ordering::Equal));
    Ok(out)
}

/// Stable and unstable subspaces of a hyperbolic symplectic matrix.
#[derive(Clone, Debug, Serialize)]
pub struct HyperbolicSplitting {
    /// Columns span `|lambda| < 1`.
    pub stable: DMatrix<f64>,
    /// Columns span `|lambda| > 1`.
    pub unstable: DMatrix<f64>,
    pub stable_projector: DMatrix<f64>,
    pub unstable_projector: DMatrix<f64>,
    pub idempotency_defect: f64,
    pub isotropy_defect: f64,
}

/// Spectral projectors from the sign of the Cayley transform
/// `C = (P - I)(P + I)^{-1}`, which sends `|lambda| > 1` to the right half plane.
pub fn stable_unstable_subspaces(p: &SymplecticMatrix) -> Result<HyperbolicSplitting> {
    let cls = classify_default(p);
    if cls.label != OrbitLabel::Hyperbolic {
        return Err(Error::NotHyperbolic(format!("spectrum is classified as {}", cls.label.name())));
    }
    let m = p.entries.nrows();
    let n = p.n;
    let id = DMatrix::identity(m, m);
    let inv = (&p.entries + &id)
        .try_inverse()
        .ok_or_else(|| Error::NotHyperbolic("-1 is an eigenvalue".into()))?;
    let c = (&p.entries - &id) * inv;
    let s = matrix_sign(&c, 100)?;
    let pu = (&id + &s) * 0.5;
    let ps = (&id - &s) * 0.5;
    let stable = column_space(&ps, 1e-8);
    let unstable = column_space(&pu, 1e-8);
    if stable.ncols() != n || unstable.ncols() != n {
        return Err(Error::NotHyperbolic(format!(
            "stable and unstable dimensions {} and {} differ from {n}",
            stable.ncols(),
            unstable.ncols()
        )));
    }
    let j = symplectic_j(n);
    let idempotency_defect = (&ps * &ps - &ps).amax().max((&pu * &pu - &pu).amax());
    let isotropy_defect = (stable.transpose() * &j * &stable).amax().max((unstable.transpose() * &j * &unstable).amax());
    Ok(HyperbolicSplitting { stable, unstable, stable_projector: ps, unstable_projector: pu, idempotency_defect, isotropy_defect })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn free_flow_is_a_shear() {
        let c = LinearSystemCurve::constant(DMatrix::zeros(2, 2), 3.0, 0.01).unwrap();
        let w = propagate(&c, &eye(4), 2.5).unwrap();
        let mut expect = eye(4);
        expect.view_mut((0, 2), (2, 2)).copy_from(&(eye(2) * 2.5));
        assert!((w - expect).amax() < 1e-12);
    }

    #[test]
    fn negative_curvature_gives_cosh_sinh() {
        let c = LinearSystemCurve::constant(-eye(3), 1.0, 1e-3).unwrap();
        let w = propagate(&c, &eye(6), 1.0).unwrap();
        let (ch, sh) = (1f64.cosh(), 1f64.sinh());
        for i in 0..3 {
            assert_relative_eq!(w[(i, i)], ch, epsilon = 1e-11);
            assert_relative_eq!(w[(i, i + 3)], sh, epsilon = 1e-11);
            assert_relative_eq!(w[(i + 3, i)], sh, epsilon = 1e-11);
        }
        assert!(symplectic_defect(&w) < 1e-12);
    }

    #[test]
    fn harmonic_oscillator_half_period() {
        let pi = std::f64::consts::PI;
        let c = LinearSystemCurve::constant(eye(2), pi, 1e-3).unwrap();
        let w = propagate(&c, &eye(4), pi).unwrap();
        assert!((w + eye(4)).amax() < 1e-11);
    }

    #[test]
    fn propagation_off_grid_is_an_error() {
        let c = LinearSystemCurve::constant(eye(1), 1.0, 0.1).unwrap();
        assert!(matches!(propagate(&c, &eye(2), 1.5), Err(Error::OutsideGrid { .. })));
    }

    #[test]
    fn classification_examples() {
        let hyp = SymplecticMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]))).unwrap();
        assert_eq!(classify_default(&hyp).label, OrbitLabel::Hyperbolic);
        let id = classify_default(&SymplecticMatrix::identity(2));
        assert_eq!((id.label, id.order), (OrbitLabel::Degenerate, Some(1)));
        let (c, s) = (1f64.cos(), 1f64.sin());
        let rot = SymplecticMatrix::new(DMatrix::from_row_slice(2, 2, &[c, s, -s, c])).unwrap();
        assert_eq!(classify_default(&rot).label, OrbitLabel::Elliptic);
        let quarter = SymplecticMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])).unwrap();
        let q = classify_default(&quarter);
        assert_eq!((q.label, q.order), (OrbitLabel::Degenerate, Some(4)));
    }

    #[test]
    fn mixed_spectrum() {
        let (c, s) = (1f64.cos(), 1f64.sin());
        let mut m = DMatrix::zeros(4, 4);
        m[(0, 0)] = 3.0;
        m[(2, 2)] = 1.0 / 3.0;
        m[(1, 1)] = c;
        m[(1, 3)] = s;
        m[(3, 1)] = -s;
        m[(3, 3)] = c;
        let p = SymplecticMatrix::new(m).unwrap();
        assert_eq!(classify_default(&p).label, OrbitLabel::Mixed);
    }

    #[test]
    fn cosh_sinh_splitting() {
        let c = LinearSystemCurve::constant(-eye(1), 1.0, 1e-3).unwrap();
        let p = SymplecticMatrix::new(propagate(&c, &eye(2), 1.0).unwrap()).unwrap();
        let sp = stable_unstable_subspaces(&p).unwrap();
        let s = sp.stable.column(0);
        let u = sp.unstable.column(0);
        assert_relative_eq!(s[0] + s[1], 0.0, epsilon = 1e-9);
        assert_relative_eq!(u[0] - u[1], 0.0, epsilon = 1e-9);
        assert!(sp.idempotency_defect < 1e-9);
    }

    #[test]
    fn diagonal_splitting_is_the_axes() {
        let p = SymplecticMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]))).unwrap();
        let sp = stable_unstable_subspaces(&p).unwrap();
        assert_relative_eq!(sp.stable[(0, 0)].abs(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(sp.unstable[(1, 0)].abs(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn elliptic_input_is_rejected() {
        let (c, s) = (1f64.cos(), 1f64.sin());
        let rot = SymplecticMatrix::new(DMatrix::from_row_slice(2, 2, &[c, s, -s, c])).unwrap();
        assert!(matches!(stable_unstable_subspaces(&rot), Err(Error::NotHyperbolic(_))));
    }

    #[test]
    fn non_symplectic_is_rejected() {
        assert!(SymplecticMatrix::new(eye(2) * 2.0).is_err());
        assert!(SymplecticMatrix::new(eye(3)).is_err());
    }
}
