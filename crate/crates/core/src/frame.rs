//! Adapted frames along an orbit, the chart they induce, and the magnetic
//! curvature of the orbit in that frame.
//!
//! Along `gamma` the frame satisfies `nabla_t e_i = Y e_i - 1/2 Y_perp e_i`
//! with `Y_perp = Pr Y Pr` and `Pr` the orthogonal projection onto
//! `gamma'^perp`. It is obtained as `e = V Q` where `V` solves
//! `nabla_t V = Y V` and `Q' = -1/2 Yhat_perp Q`, `Yhat` the matrix of `Y`
//! in the basis `V`. `Q` is advanced with a fourth-order Magnus step, so it
//! is orthogonal up to rounding and `e_1 = gamma' / sqrt(2c)` exactly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{find_self_intersection, MagneticSystem, OrbitSegment};
use crate::geometry::{
    christoffels_unchecked, contract_nabla, lorentz_unchecked, nabla_form_unchecked, riemann_unchecked, Axis,
    ChartMetric, ClosedTwoForm, MatrixFn,
};
use crate::linalg::{commutator, complete_orthonormal, rk4_step};

/// Largest tolerated `|E^T g E - I|` along a frame.
pub const FRAME_DRIFT_LIMIT: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct FermiFrame {
    pub times: Vec<f64>,
    pub step: f64,
    pub energy: f64,
    pub points: Vec<DVector<f64>>,
    pub velocities: Vec<DVector<f64>>,
    /// Columns `V_1..V_m` with `nabla_t V = Y V`.
    pub transported: Vec<DMatrix<f64>>,
    /// `Q` with `E = V Q`; the inverse of the rotation `P`.
    pub rotation: Vec<DMatrix<f64>>,
    /// Columns `e_1..e_m`.
    pub frame: Vec<DMatrix<f64>>,
    /// Coordinate derivative `dE/dt`.
    pub frame_rate: Vec<DMatrix<f64>>,
    /// `Omega(e_i, e_j)`.
    pub lorentz: Vec<DMatrix<f64>>,
    pub orthonormality_drift: f64,
    /// For closed orbits, `O` with `e_perp(T) = e_perp(0) O`.
    pub closing_rotation: Option<DMatrix<f64>>,
}

impl FermiFrame {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Samples `k0..=k1`, dropping the closing rotation.
    pub fn slice(&self, k0: usize, k1: usize) -> Result<FermiFrame> {
        if k0 >= k1 || k1 >= self.len() {
            return Err(Error::Invalid(format!("bad slice {k0}..={k1} of {} samples", self.len())));
        }
        Ok(FermiFrame {
            times: self.times[k0..=k1].to_vec(),
            step: self.step,
            energy: self.energy,
            points: self.points[k0..=k1].to_vec(),
            velocities: self.velocities[k0..=k1].to_vec(),
            transported: self.transported[k0..=k1].to_vec(),
            rotation: self.rotation[k0..=k1].to_vec(),
            frame: self.frame[k0..=k1].to_vec(),
            frame_rate: self.frame_rate[k0..=k1].to_vec(),
            lorentz: self.lorentz[k0..=k1].to_vec(),
            orthonormality_drift: self.orthonormality_drift,
            closing_rotation: None,
        })
    }

    /// `e_1 - gamma'/|gamma'|` and `E^T g E - I`, maximised over the grid.
    pub fn defects(&self, chart: &ChartMetric) -> (f64, f64) {
        let mut e1_err: f64 = 0.0;
        let mut orth: f64 = 0.0;
        for k in 0..self.len() {
            let g = chart.metric_raw(&self.points[k]);
            let e = &self.frame[k];
            let m = e.nrows();
            orth = orth.max((e.transpose() * &g * e - DMatrix::identity(m, m)).amax());
            let v = &self.velocities[k];
            let vn = (v.transpose() * &g * v)[(0, 0)].sqrt();
            e1_err = e1_err.max((e.column(0) - v / vn).amax());
        }
        (e1_err, orth)
    }

    fn cell(&self, t: f64) -> Result<(usize, f64)> {
        let t0 = self.times[0];
        let t1 = self.times[self.times.len() - 1];
        let tol = 1e-9 * self.step;
        if t < t0 - tol || t > t1 + tol {
            return Err(Error::OutsideGrid { time: t, start: t0, end: t1 });
        }
        let s = ((t - t0) / self.step).clamp(0.0, (self.len() - 1) as f64);
        let k = (s.floor() as usize).min(self.len() - 2);
        Ok((k, s - k as f64))
    }

    /// Cubic Hermite interpolants of `(gamma, gamma', E, E')` at `t`.
    pub fn interpolate(&self, t: f64) -> Result<FrameSample> {
        let (k, s) = self.cell(t)?;
        let h = self.step;
        let (h00, h10, h01, h11) = (2.0 * s * s * s - 3.0 * s * s + 1.0, s * s * s - 2.0 * s * s + s, -2.0 * s * s * s + 3.0 * s * s, s * s * s - s * s);
        let (d00, d10, d01, d11) = (
            (6.0 * s * s - 6.0 * s) / h,
            3.0 * s * s - 4.0 * s + 1.0,
            (-6.0 * s * s + 6.0 * s) / h,
            3.0 * s * s - 2.0 * s,
        );
        let point = &self.points[k] * h00 + &self.velocities[k] * (h * h10) + &self.points[k + 1] * h01 + &self.velocities[k + 1] * (h * h11);
        let velocity = &self.points[k] * d00 + &self.velocities[k] * d10 + &self.points[k + 1] * d01 + &self.velocities[k + 1] * d11;
        let frame = &self.frame[k] * h00 + &self.frame_rate[k] * (h * h10) + &self.frame[k + 1] * h01 + &self.frame_rate[k + 1] * (h * h11);
        let frame_rate = &self.frame[k] * d00 + &self.frame_rate[k] * d10 + &self.frame[k + 1] * d01 + &self.frame_rate[k + 1] * d11;
        Ok(FrameSample { point, velocity, frame, frame_rate })
    }
}

#[derive(Clone, Debug)]
pub struct FrameSample {
    pub point: DVector<f64>,
    pub velocity: DVector<f64>,
    pub frame: DMatrix<f64>,
    pub frame_rate: DMatrix<f64>,
}

/// Zeroes the first row and column.
pub fn perp_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut b = a.clone();
    b.row_mut(0).fill(0.0);
    b.column_mut(0).fill(0.0);
    b
}

/// Coordinate matrix of `Y_perp = Pr Y Pr` given `e_1` and the metric.
fn lorentz_perp(y: &DMatrix<f64>, g: &DMatrix<f64>, e1: &DVector<f64>) -> DMatrix<f64> {
    let m = y.nrows();
    let pr = DMatrix::identity(m, m) - e1 * (e1.transpose() * g);
    &pr * y * &pr
}

/// Builds the adapted frame along `orbit`.
pub fn transported_frame(sys: &MagneticSystem, orbit: &OrbitSegment) -> Result<FermiFrame> {
    let m = sys.dim();
    let chart = &sys.chart;
    let form = &sys.form;
    let x0 = &orbit.first().x;
    let v0 = &orbit.first().v;
    let v_init = complete_orthonormal(&chart.metric(x0)?, v0)?;

    // joint state: x, v, V (column-major)
    let pack = |x: &DVector<f64>, v: &DVector<f64>, vv: &DMatrix<f64>| {
        let mut y = DVector::zeros(2 * m + m * m);
        y.rows_mut(0, m).copy_from(x);
        y.rows_mut(m, m).copy_from(v);
        y.rows_mut(2 * m, m * m).copy_from_slice(vv.as_slice());
        y
    };
    let field = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let x = y.rows(0, m).into_owned();
        let v = y.rows(m, m).into_owned();
        let vv = DMatrix::from_column_slice(m, m, y.rows(2 * m, m * m).as_slice());
        let yl = lorentz_unchecked(chart, form, &x)?;
        let mut acc = &yl * &v;
        let mut dv = &yl * &vv;
        if !chart.is_flat() {
            let gam = christoffels_unchecked(chart, &x)?;
            acc -= gam.contract(&v, &v);
            dv -= gam.contract_left(&v) * &vv;
        }
        let mut out = DVector::zeros(2 * m + m * m);
        out.rows_mut(0, m).copy_from(&v);
        out.rows_mut(m, m).copy_from(&acc);
        out.rows_mut(2 * m, m * m).copy_from_slice(dv.as_slice());
        Ok(out)
    };

    let n_pts = orbit.len();
    let h = orbit.step;
    let mut transported = Vec::with_capacity(n_pts);
    let mut y = pack(x0, v0, &v_init);
    transported.push(v_init.clone());
    for _ in 1..n_pts {
        y = rk4_step(&field, &y, h)?;
        transported.push(DMatrix::from_column_slice(m, m, y.rows(2 * m, m * m).as_slice()));
    }

    // A = -1/2 Yhat_perp and its exact derivative from nabla_gamma' Omega.
    let mut a_mat = Vec::with_capacity(n_pts);
    let mut a_dot = Vec::with_capacity(n_pts);
    for (k, st) in orbit.states.iter().enumerate() {
        let w = form.at(&st.x);
        let vv = &transported[k];
        let yhat = vv.transpose() * w.transpose() * vv;
        a_mat.push(perp_part(&yhat) * -0.5);
        let nab = contract_nabla(&nabla_form_unchecked(chart, form, &st.x)?, &st.v);
        let ydot = vv.transpose() * nab.transpose() * vv;
        a_dot.push(perp_part(&ydot) * -0.5);
    }

    let mut rotation = Vec::with_capacity(n_pts);
    let mut q = DMatrix::identity(m, m);
    rotation.push(q.clone());
    for k in 0..n_pts - 1 {
        let om = (&a_mat[k] + &a_mat[k + 1]) * (h / 2.0)
            + (&a_dot[k] - &a_dot[k + 1]) * (h * h / 12.0)
            + commutator(&a_mat[k + 1], &a_mat[k]) * (h * h / 12.0);
        q = om.exp() * q;
        rotation.push(q.clone());
    }

    let mut frame = Vec::with_capacity(n_pts);
    let mut frame_rate = Vec::with_capacity(n_pts);
    let mut lorentz = Vec::with_capacity(n_pts);
    let mut drift: f64 = 0.0;
    for k in 0..n_pts {
        let st = &orbit.states[k];
        let e = &transported[k] * &rotation[k];
        let g = chart.metric_raw(&st.x);
        drift = drift.max((e.transpose() * &g * &e - DMatrix::identity(m, m)).amax());
        let yl = lorentz_unchecked(chart, form, &st.x)?;
        let e1 = e.column(0).into_owned();
        let mut rate = (&yl - lorentz_perp(&yl, &g, &e1) * 0.5) * &e;
        if !chart.is_flat() {
            rate -= christoffels_unchecked(chart, &st.x)?.contract_left(&st.v) * &e;
        }
        lorentz.push(e.transpose() * form.at(&st.x) * &e);
        frame.push(e);
        frame_rate.push(rate);
    }
    if drift > FRAME_DRIFT_LIMIT {
        return Err(Error::FrameDrift { drift, limit: FRAME_DRIFT_LIMIT });
    }
    let closing_rotation = orbit.period.map(|_| {
        let g0 = chart.metric_raw(x0);
        let o = frame[0].transpose() * g0 * &frame[n_pts - 1];
        o.view((1, 1), (m - 1, m - 1)).into_owned()
    });
    Ok(FermiFrame {
        times: orbit.times.clone(),
        step: h,
        energy: orbit.energy,
        points: orbit.states.iter().map(|s| s.x.clone()).collect(),
        velocities: orbit.states.iter().map(|s| s.v.clone()).collect(),
        transported,
        rotation,
        frame,
        frame_rate,
        lorentz,
        orthonormality_drift: drift,
        closing_rotation,
    })
}

/// Algebraic forms of the curvature operator that can be assembled from the
/// stored blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assembly {
    /// `R + dOmega - 1/2 Omega' + 3/4 Omega^2 - Omegatilde`.
    Consolidated,
    /// `R + dOmega - Omega' + 1/2 Omega'_perp + 1/2 Omega Omega_perp + 1/4 Omega_perp^2 - Omegatilde`,
    /// which on blocks equals `R + dOmega - 1/2 Omega' + 3/4 Omega_perp^2 - Omegatilde`.
    PreConsolidation,
    /// `R + dOmega - 1/2 Omega' - 1/4 Omega_perp^2 - Omegatilde`, derived from the
    /// frame equations; agrees with `PreConsolidation` for `m = 2`.
    Rederived,
}

impl Assembly {
    pub const ALL: [Assembly; 3] = [Assembly::Consolidated, Assembly::PreConsolidation, Assembly::Rederived];

    pub fn name(&self) -> &'static str {
        match self {
            Assembly::Consolidated => "consolidated",
            Assembly::PreConsolidation => "pre_consolidation",
            Assembly::Rederived => "rederived",
        }
    }
}

/// Curvature blocks on `gamma'^perp`, indices `2..m` of the frame.
///
/// `riemann_ij = <R(e_i, gamma') gamma', e_j>`,
/// `d_omega_ij = (nabla_{e_j} Omega)(e_i, gamma')`,
/// `omega_prime_ij = (nabla_{gamma'} Omega)(e_i, e_j)`,
/// `omega_sq` is the block of `Yf Yf` with `Yf_ij = Omega(e_i, e_j)`,
/// `omega_tilde_ij = Yf_i1 Yf_1j` and `perp_sq = (Yf_perp)^2`.
#[derive(Clone, Debug, Serialize)]
pub struct TermBlocks {
    pub riemann: DMatrix<f64>,
    pub d_omega: DMatrix<f64>,
    pub omega_prime: DMatrix<f64>,
    pub omega_sq: DMatrix<f64>,
    pub omega_tilde: DMatrix<f64>,
    pub perp_sq: DMatrix<f64>,
}

/// Weighted contributions whose sum is the curvature matrix.
#[derive(Clone, Debug, Serialize)]
pub struct TermContributions {
    pub riemann: DMatrix<f64>,
    pub d_omega: DMatrix<f64>,
    pub omega_prime: DMatrix<f64>,
    pub quadratic: DMatrix<f64>,
    pub omega_tilde: DMatrix<f64>,
}

impl TermContributions {
    pub fn total(&self) -> DMatrix<f64> {
        &self.riemann + &self.d_omega + &self.omega_prime + &self.quadratic + &self.omega_tilde
    }
}

impl TermBlocks {
    pub fn contributions(&self, assembly: Assembly) -> TermContributions {
        let quadratic = match assembly {
            Assembly::Consolidated => &self.omega_sq * 0.75,
            Assembly::PreConsolidation => &self.perp_sq * 0.75,
            Assembly::Rederived => &self.perp_sq * -0.25,
        };
        TermContributions {
            riemann: self.riemann.clone(),
            d_omega: self.d_omega.clone(),
            omega_prime: &self.omega_prime * -0.5,
            quadratic,
            omega_tilde: -&self.omega_tilde,
        }
    }

    pub fn assemble(&self, assembly: Assembly) -> DMatrix<f64> {
        self.contributions(assembly).total()
    }
}

#[derive(Clone, Debug)]
pub struct CurvatureCurve {
    pub times: Vec<f64>,
    pub step: f64,
    pub energy: f64,
    pub assembly: Assembly,
    pub k: Vec<DMatrix<f64>>,
    pub terms: Vec<TermBlocks>,
    /// `a_k = <Y e_1, e_k>` for `k >= 2`.
    pub a: Vec<DVector<f64>>,
    /// Matrix of `Y` on `gamma'^perp` acting on frame components, `B_kj = <Y e_j, e_k>`.
    pub b: Vec<DMatrix<f64>>,
    pub closing_rotation: Option<DMatrix<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssemblyDiscrepancy {
    pub first: Assembly,
    pub second: Assembly,
    pub max_abs_difference: f64,
}

impl CurvatureCurve {
    pub fn n(&self) -> usize {
        self.k[0].nrows()
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }

    /// The same samples assembled differently.
    pub fn with_assembly(&self, assembly: Assembly) -> CurvatureCurve {
        let mut c = self.clone();
        c.assembly = assembly;
        c.k = self.terms.iter().map(|t| t.assemble(assembly)).collect();
        c
    }

    pub fn discrepancies(&self) -> Vec<AssemblyDiscrepancy> {
        let mut out = Vec::new();
        for (i, &a) in Assembly::ALL.iter().enumerate() {
            for &b in &Assembly::ALL[i + 1..] {
                let d = self
                    .terms
                    .iter()
                    .map(|t| (t.assemble(a) - t.assemble(b)).amax())
                    .fold(0.0, f64::max);
                out.push(AssemblyDiscrepancy { first: a, second: b, max_abs_difference: d });
            }
        }
        out
    }

    /// Largest `|K - K^T|` over the samples.
    pub fn asymmetry(&self) -> f64 {
        self.k.iter().map(|k| (k - k.transpose()).amax()).fold(0.0, f64::max)
    }

    /// `t`, the entries of `K` row-major, then each raw term block
    /// (`riemann`, `d_omega`, `omega_prime`, `omega_sq`, `omega_tilde`,
    /// `perp_sq`) row-major, with indices `2..m`.
    pub fn to_csv(&self) -> String {
        let n = self.n();
        let names = ["k", "riemann", "d_omega", "omega_prime", "omega_sq", "omega_tilde", "perp_sq"];
        let mut out = String::from("t");
        for name in names {
            for i in 0..n {
                for j in 0..n {
                    out.push_str(&format!(",{name}_{}{}", i + 2, j + 2));
                }
            }
        }
        out.push('\n');
        for (idx, t) in self.times.iter().enumerate() {
            let tb = &self.terms[idx];
            out.push_str(&format!("{t:.12e}"));
            for m in [&self.k[idx], &tb.riemann, &tb.d_omega, &tb.omega_prime, &tb.omega_sq, &tb.omega_tilde, &tb.perp_sq] {
                for i in 0..n {
                    for j in 0..n {
                        out.push_str(&format!(",{:.12e}", m[(i, j)]));
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Curvature blocks along the orbit; `K` uses the rederived assembly, the
/// one that matches finite differences of the flow.
pub fn magnetic_curvature(sys: &MagneticSystem, orbit: &OrbitSegment, frame: &FermiFrame) -> Result<CurvatureCurve> {
    let m = sys.dim();
    if m < 2 {
        return Err(Error::Invalid("magnetic curvature needs dimension at least 2".into()));
    }
    let n = m - 1;
    let chart = &sys.chart;
    let form = &sys.form;
    let mut terms = Vec::with_capacity(orbit.len());
    let mut a = Vec::with_capacity(orbit.len());
    let mut b = Vec::with_capacity(orbit.len());
    for (k, st) in orbit.states.iter().enumerate() {
        let e = &frame.frame[k];
        let g = chart.metric_raw(&st.x);
        let nabla = nabla_form_unchecked(chart, form, &st.x)?;
        let riem = if chart.is_flat() { None } else { Some(riemann_unchecked(chart, &st.x)?) };
        let yf = &frame.lorentz[k];
        let nab_v = contract_nabla(&nabla, &st.v);
        let mut riemann = DMatrix::zeros(n, n);
        let mut d_omega = DMatrix::zeros(n, n);
        let mut omega_prime = DMatrix::zeros(n, n);
        for i in 0..n {
            let ei = e.column(i + 1).into_owned();
            for j in 0..n {
                let ej = e.column(j + 1).into_owned();
                if let Some(r) = &riem {
                    riemann[(i, j)] = r.lowered(&g, &ei, &st.v, &st.v, &ej);
                }
                d_omega[(i, j)] = (ei.transpose() * contract_nabla(&nabla, &ej) * &st.v)[(0, 0)];
                omega_prime[(i, j)] = (ei.transpose() * &nab_v * &ej)[(0, 0)];
            }
        }
        let full_sq = yf * yf;
        let yperp = yf.view((1, 1), (n, n)).into_owned();
        let mut omega_tilde = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                omega_tilde[(i, j)] = yf[(i + 1, 0)] * yf[(0, j + 1)];
            }
        }
        terms.push(TermBlocks {
            riemann,
            d_omega,
            omega_prime,
            omega_sq: full_sq.view((1, 1), (n, n)).into_owned(),
            omega_tilde,
            perp_sq: &yperp * &yperp,
        });
        a.push(DVector::from_iterator(n, (0..n).map(|i| yf[(0, i + 1)])));
        b.push(yperp.transpose());
    }
    let assembly = Assembly::Rederived;
    Ok(CurvatureCurve {
        times: orbit.times.clone(),
        step: orbit.step,
        energy: orbit.energy,
        assembly,
        k: terms.iter().map(|t| t.assemble(assembly)).collect(),
        terms,
        a,
        b,
        closing_rotation: frame.closing_rotation.clone(),
    })
}

/// A Jacobi field sampled on an orbit grid: `J` and its covariant derivative,
/// both in chart coordinates.
#[derive(Clone, Debug)]
pub struct SampledJacobiField {
    pub j: Vec<DVector<f64>>,
    pub jp: Vec<DVector<f64>>,
}

/// Initial `(J, J')` in coordinates for reduced data `(f, f')` at grid index
/// `k`: `J = e_perp f`, `J' = e_perp (f' + B f / 2)`, so `<J', gamma'> = 0`.
pub fn jacobi_initial_data(
    frame: &FermiFrame,
    curve: &CurvatureCurve,
    k: usize,
    f: &DVector<f64>,
    fp: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = curve.n();
    let e = frame.frame[k].columns(1, n).into_owned();
    let jp_comp = fp + &curve.b[k] * f * 0.5;
    (&e * f, &e * jp_comp)
}

/// `(f_1, f, f')` of a Jacobi field at grid index `k`, where `f_1` is the
/// component along `e_1`, `f = <J, e_perp>` and `f' = <J', e_perp> - a f_1 - B f / 2`.
pub fn reduced_coordinates(
    chart: &ChartMetric,
    frame: &FermiFrame,
    curve: &CurvatureCurve,
    k: usize,
    j: &DVector<f64>,
    jp: &DVector<f64>,
) -> (f64, DVector<f64>, DVector<f64>) {
    let n = curve.n();
    let g = chart.metric_raw(&frame.points[k]);
    let comps = frame.frame[k].transpose() * &g * j;
    let comps_p = frame.frame[k].transpose() * &g * jp;
    let f1 = comps[0];
    let f = comps.rows(1, n).into_owned();
    let fp = comps_p.rows(1, n).into_owned() - &curve.a[k] * f1 - &curve.b[k] * &f * 0.5;
    (f1, f, fp)
}

#[derive(Clone, Debug, Serialize)]
pub struct JacobiResidual {
    /// `max |f'' + K f|`.
    pub equation: f64,
    /// `max |f_1' - a . f|`.
    pub slaving: f64,
    /// `max |d/dt f - f'|`, the reduced velocity against differences of `f`.
    pub consistency: f64,
    /// Variation of `<J', gamma'>` along the samples.
    pub momentum_drift: f64,
}

fn fd4(v: &[DVector<f64>], k: usize, h: f64) -> DVector<f64> {
    (&v[k - 2] - &v[k - 1] * 8.0 + &v[k + 1] * 8.0 - &v[k + 2]) / (12.0 * h)
}

/// Projects a sampled Jacobi field onto the frame and measures how well the
/// reduced coordinates satisfy `f'' + K f = 0` and `f_1' = a . f`, using
/// fourth-order differences at interior points.
pub fn reduced_jacobi_residual(
    chart: &ChartMetric,
    frame: &FermiFrame,
    curve: &CurvatureCurve,
    field: &SampledJacobiField,
) -> Result<JacobiResidual> {
    let len = curve.len();
    if field.j.len() != len || field.jp.len() != len || frame.len() != len {
        return Err(Error::Shape("samples must lie on the curvature grid".into()));
    }
    if len < 5 {
        return Err(Error::Invalid("need at least five samples".into()));
    }
    let mut f1 = Vec::with_capacity(len);
    let mut f = Vec::with_capacity(len);
    let mut fp = Vec::with_capacity(len);
    let mut momentum = Vec::with_capacity(len);
    for k in 0..len {
        let (a, b, c) = reduced_coordinates(chart, frame, curve, k, &field.j[k], &field.jp[k]);
        f1.push(DVector::from_element(1, a));
        f.push(b);
        fp.push(c);
        momentum.push(chart.inner(&frame.points[k], &field.jp[k], &frame.velocities[k]));
    }
    let h = curve.step;
    let mut out = JacobiResidual { equation: 0.0, slaving: 0.0, consistency: 0.0, momentum_drift: 0.0 };
    for k in 2..len - 2 {
        let fpp = fd4(&fp, k, h);
        out.equation = out.equation.max((fpp + &curve.k[k] * &f[k]).amax());
        out.slaving = out.slaving.max((fd4(&f1, k, h)[0] - curve.a[k].dot(&f[k])).abs());
        out.consistency = out.consistency.max((fd4(&f, k, h) - &fp[k]).amax());
    }
    out.momentum_drift = momentum.iter().map(|p| (p - momentum[0]).abs()).fold(0.0, f64::max);
    Ok(out)
}

/// The chart `Phi(y) = exp_{gamma(y1)}(sum_{i>=2} y_i e_i(y1))` on a tube of
/// radius `delta` around an orbit segment.
#[derive(Clone, Debug)]
pub struct FermiChart {
    sys: MagneticSystem,
    frame: Arc<FermiFrame>,
    delta: f64,
    exp_steps: usize,
}

impl FermiChart {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn frame(&self) -> &FermiFrame {
        &self.frame
    }

    pub fn dim(&self) -> usize {
        self.sys.dim()
    }

    pub fn t_range(&self) -> (f64, f64) {
        (self.frame.times[0], self.frame.times[self.frame.len() - 1])
    }

    fn exp_map(&self, p: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        if self.sys.chart.is_flat() {
            return Ok(p + w);
        }
        let m = self.dim();
        let chart = &self.sys.chart;
        let f = |y: &DVector<f64>| -> Result<DVector<f64>> {
            let x = y.rows(0, m).into_owned();
            let v = y.rows(m, m).into_owned();
            let acc = -christoffels_unchecked(chart, &x)?.contract(&v, &v);
            let mut out = DVector::zeros(2 * m);
            out.rows_mut(0, m).copy_from(&v);
            out.rows_mut(m, m).copy_from(&acc);
            Ok(out)
        };
        let mut y = DVector::zeros(2 * m);
        y.rows_mut(0, m).copy_from(p);
        y.rows_mut(m, m).copy_from(w);
        let h = 1.0 / self.exp_steps as f64;
        for _ in 0..self.exp_steps {
            y = rk4_step(&f, &y, h)?;
        }
        Ok(y.rows(0, m).into_owned())
    }

    /// `Phi(y)` in the unwrapped coordinates of the orbit.
    pub fn map(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let s = self.frame.interpolate(y[0])?;
        let m = self.dim();
        let mut w = DVector::zeros(m);
        for i in 1..m {
            w += s.frame.column(i) * y[i];
        }
        self.exp_map(&s.point, &w)
    }

    /// `D Phi(y)`.
    pub fn jacobian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let m = self.dim();
        if self.sys.chart.is_flat() {
            let s = self.frame.interpolate(y[0])?;
            let mut j = DMatrix::zeros(m, m);
            let mut c1 = s.velocity.clone();
            for i in 1..m {
                c1 += s.frame_rate.column(i) * y[i];
                j.set_column(i, &s.frame.column(i));
            }
            j.set_column(0, &c1);
            return Ok(j);
        }
        let h = 1e-6;
        let mut j = DMatrix::zeros(m, m);
        for k in 0..m {
            let mut yp = y.clone();
            yp[k] += h;
            let mut ym = y.clone();
            ym[k] -= h;
            j.set_column(k, &((self.map(&yp)? - self.map(&ym)?) / (2.0 * h)));
        }
        Ok(j)
    }

    /// Metric of the chart, `D Phi^T g(Phi) D Phi`.
    pub fn metric(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let j = self.jacobian(y)?;
        let x = self.map(y)?;
        Ok(j.transpose() * self.sys.chart.metric_raw(&x) * j)
    }

    fn nearest_index(&self, x: &DVector<f64>) -> (usize, DVector<f64>) {
        let mut best = (0, f64::INFINITY, DVector::zeros(self.dim()));
        for (k, p) in self.frame.points.iter().enumerate() {
            let d = self.sys.chart.displacement(p, x);
            let n = d.norm();
            if n < best.1 {
                best = (k, n, d);
            }
        }
        (best.0, best.2)
    }

    /// `psi = Phi^{-1}` by Newton from the nearest orbit sample; `None` when `x`
    /// is not within the tube.
    pub fn inverse(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let m = self.dim();
        let (k, disp) = self.nearest_index(x);
        let scale = (2.0 * self.frame.energy).sqrt().max(1.0);
        if disp.norm() > 4.0 * self.delta * scale + 2.0 * self.frame.step * scale {
            return None;
        }
        let target = &self.frame.points[k] + &disp;
        let g = self.sys.chart.metric_raw(&self.frame.points[k]);
        let comps = self.frame.frame[k].transpose() * &g * &disp;
        let mut y = DVector::zeros(m);
        y[0] = self.frame.times[k] + comps[0] / (2.0 * self.frame.energy).sqrt();
        for i in 1..m {
            y[i] = comps[i];
        }
        let (t0, t1) = self.t_range();
        for _ in 0..40 {
            y[0] = y[0].clamp(t0, t1);
            let r = self.map(&y).ok()? - &target;
            if r.norm() < 1e-14 * scale {
                break;
            }
            let j = self.jacobian(&y).ok()?;
            let dy = j.lu().solve(&r)?;
            y -= &dy;
            if dy.norm() < 1e-15 * scale {
                break;
            }
        }
        let r = (self.map(&y).ok()? - &target).norm();
        if r > 1e-10 * scale || y[0] < t0 - 1e-12 || y[0] > t1 + 1e-12 {
            return None;
        }
        Some(y)
    }

    /// The chart as a `ChartMetric` on `[t0, t1] x (-delta, delta)^n`.
    pub fn as_chart_metric(&self) -> ChartMetric {
        let (t0, t1) = self.t_range();
        let mut axes = vec![Axis::interval(t0 - 1e-9, t1 + 1e-9)];
        for _ in 1..self.dim() {
            axes.push(Axis::interval(-self.delta, self.delta));
        }
        let me = self.clone();
        let metric: MatrixFn = Arc::new(move |y: &DVector<f64>| {
            me.metric(y).unwrap_or_else(|_| DMatrix::from_element(y.len(), y.len(), f64::NAN))
        });
        ChartMetric::new("fermi", axes, metric, f64::INFINITY)
    }

    /// Transports a form written in chart coordinates to the original
    /// coordinates; it vanishes outside the tube.
    pub fn push_form<F>(&self, label: impl Into<String>, form_in_chart: F) -> ClosedTwoForm
    where
        F: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        let me = self.clone();
        let m = self.dim();
        let f: MatrixFn = Arc::new(move |x: &DVector<f64>| {
            let Some(y) = me.inverse(x) else {
                return DMatrix::zeros(m, m);
            };
            let w = form_in_chart(&y);
            if w.iter().all(|a| *a == 0.0) {
                return w;
            }
            let Ok(j) = me.jacobian(&y) else {
                return DMatrix::zeros(m, m);
            };
            match j.try_inverse() {
                Some(dpsi) => dpsi.transpose() * w * dpsi,
                None => DMatrix::zeros(m, m),
            }
        });
        ClosedTwoForm::from_matrix_fn(m, label, f)
    }
}

/// Builds the chart on a tube of radius `delta` and checks that it is a
/// diffeomorphism onto its image on sample points.
pub fn fermi_chart(sys: &MagneticSystem, orbit: &OrbitSegment, frame: &FermiFrame, delta: f64) -> Result<FermiChart> {
    if !(delta > 0.0) {
        return Err(Error::Invalid("tube radius must be positive".into()));
    }
    if frame.len() != orbit.len() {
        return Err(Error::Shape("frame and orbit have different grids".into()));
    }
    let speed = orbit.speed();
    let exclusion = ((4.0 * delta / speed.max(1e-12)) / orbit.step).ceil() as usize + 2;
    if let Some(hit) = find_self_intersection(sys, orbit, 2.0 * delta, exclusion) {
        let t = |k: usize| orbit.times[k];
        return Err(Error::ChartNotInjective {
            first: vec![t(hit.first_segment)],
            second: vec![t(hit.second_segment)],
        });
    }
    let chart = FermiChart {
        sys: sys.clone(),
        frame: Arc::new(frame.clone()),
        delta,
        exp_steps: 16,
    };
    let m = sys.dim();
    let (t0, t1) = chart.t_range();
    let nt = 24.min(orbit.len());
    for a in 0..nt {
        let t = t0 + (t1 - t0) * (a as f64 + 0.5) / nt as f64;
        for dir in 1..m {
            for &r in &[-0.9 * delta, 0.9 * delta] {
                let mut y = DVector::zeros(m);
                y[0] = t;
                y[dir] = r;
                let x = chart.map(&y)?;
                match chart.inverse(&x) {
                    Some(back) if (&back - &y).norm() < 1e-8 => {}
                    Some(back) => {
                        return Err(Error::ChartNotInjective {
                            first: y.iter().cloned().collect(),
                            second: back.iter().cloned().collect(),
                        })
                    }
                    None => {
                        return Err(Error::ChartNotInjective {
                            first: y.iter().cloned().collect(),
                            second: vec![],
                        })
                    }
                }
            }
        }
    }
    Ok(chart)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{integrate, PhaseState};
    use crate::geometry::ClosedTwoForm;
    use approx::assert_relative_eq;

    fn larmor_orbit(duration: f64) -> (MagneticSystem, OrbitSegment) {
        let sys = MagneticSystem::new(ChartMetric::flat_torus(2), ClosedTwoForm::constant_planar(1.0)).unwrap();
        let s = PhaseState::from_slices(&[0.5, 0.5], &[1.0, 0.0]);
        let o = integrate(&sys, &s, duration, 1e-3).unwrap();
        (sys, o)
    }

    #[test]
    fn planar_frame_has_trivial_rotation() {
        let (sys, o) = larmor_orbit(1.0);
        let f = transported_frame(&sys, &o).unwrap();
        for q in &f.rotation {
            assert!((q - DMatrix::identity(2, 2)).amax() < 1e-15);
        }
        let (e1, orth) = f.defects(&sys.chart);
        assert!(e1 < 1e-12 && orth < 1e-12);
    }

    #[test]
    fn larmor_curvature_is_b_squared() {
        let (sys, o) = larmor_orbit(1.0);
        let f = transported_frame(&sys, &o).unwrap();
        let c = magnetic_curvature(&sys, &o, &f).unwrap();
        for k in &c.k {
            assert_relative_eq!(k[(0, 0)], 1.0, epsilon = 1e-12);
        }
        let cons = c.with_assembly(Assembly::Consolidated);
        assert_relative_eq!(cons.k[5][(0, 0)], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn contributions_sum_to_k() {
        let sys = MagneticSystem::new(
            ChartMetric::flat_torus(3),
            ClosedTwoForm::constant_matrix(
                &DMatrix::from_row_slice(3, 3, &[0.0, 0.3, -0.2, -0.3, 0.0, 0.5, 0.2, -0.5, 0.0]),
                "c",
            ),
        )
        .unwrap();
        let o = integrate(&sys, &PhaseState::from_slices(&[0.1, 0.2, 0.3], &[1.0, 0.0, 0.0]), 0.5, 1e-3).unwrap();
        let f = transported_frame(&sys, &o).unwrap();
        let c = magnetic_curvature(&sys, &o, &f).unwrap();
        for (t, k) in c.terms.iter().zip(&c.k) {
            assert!((t.contributions(Assembly::Rederived).total() - k).amax() < 1e-14);
        }
        assert!(c.asymmetry() < 1e-10);
    }

    #[test]
    fn fermi_chart_round_trip_on_larmor_arc() {
        let (sys, o) = larmor_orbit(0.2);
        let f = transported_frame(&sys, &o).unwrap();
        let ch = fermi_chart(&sys, &o, &f, 0.02).unwrap();
        let y = DVector::from_column_slice(&[0.1234, 0.011]);
        let x = ch.map(&y).unwrap();
        let back = ch.inverse(&x).unwrap();
        assert!((back - y).norm() < 1e-12);
        let g = ch.metric(&DVector::from_column_slice(&[0.05, 0.0])).unwrap();
        assert!((&g - DMatrix::identity(2, 2)).amax() < 1e-10, "{g}");
    }
}
