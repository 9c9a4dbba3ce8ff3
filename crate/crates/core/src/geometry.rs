//! Charts with a Riemannian metric, closed two-forms, and the tensors built
//! from them.
//!
//! Tangent vectors are coordinate columns. A two-form is stored as the
//! antisymmetric matrix `Omega` with `Omega(u, v) = u^T Omega v`. The Lorentz
//! operator `Y` is defined by `<Y u, v> = Omega(u, v)`, hence
//! `Y = g^{-1} Omega^T`.
//!
//! Curvature follows `R(X, Y) Z = nabla_X nabla_Y Z - nabla_Y nabla_X Z - nabla_[X,Y] Z`,
//! so the round sphere has `<R(u, v) v, u> = |u|^2 |v|^2 - <u, v>^2`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linalg::{halton, FD4_OFFSETS, FD4_WEIGHTS, PRIMES};

pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type MatrixDerivFn = Arc<dyn Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Fourth-order central derivative of a matrix-valued map along each axis.
pub fn fd_partials<F>(f: F, x: &DVector<f64>, h: f64) -> Vec<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    (0..x.len())
        .map(|k| {
            let mut acc: Option<DMatrix<f64>> = None;
            for (o, w) in FD4_OFFSETS.iter().zip(FD4_WEIGHTS.iter()) {
                let mut y = x.clone();
                y[k] += o * h;
                let term = f(&y) * (w / h);
                acc = Some(match acc {
                    None => term,
                    Some(a) => a + term,
                });
            }
            acc.expect("stencil is non-empty")
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub periodic: bool,
}

impl Axis {
    pub fn periodic(lo: f64, hi: f64) -> Self {
        Axis { lo, hi, periodic: true }
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        Axis { lo, hi, periodic: false }
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

/// A coordinate chart with a metric `g(x)`.
#[derive(Clone)]
pub struct ChartMetric {
    name: String,
    axes: Vec<Axis>,
    metric: MatrixFn,
    metric_derivative: Option<MatrixDerivFn>,
    fd_step: f64,
    injectivity_radius: f64,
    flat: bool,
}

impl fmt::Debug for ChartMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChartMetric")
            .field("name", &self.name)
            .field("axes", &self.axes)
            .field("injectivity_radius", &self.injectivity_radius)
            .field("flat", &self.flat)
            .finish()
    }
}

impl ChartMetric {
    /// A chart whose metric derivatives are taken by finite differences.
    pub fn new(name: impl Into<String>, axes: Vec<Axis>, metric: MatrixFn, injectivity_radius: f64) -> Self {
        ChartMetric {
            name: name.into(),
            axes,
            metric,
            metric_derivative: None,
            fd_step: DEFAULT_FD_STEP,
            injectivity_radius,
            flat: false,
        }
    }

    pub fn with_derivative(mut self, d: MatrixDerivFn) -> Self {
        self.metric_derivative = Some(d);
        self
    }

    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = h;
        self
    }

    /// The flat torus `R^m / Z^m` with the Euclidean metric.
    pub fn flat_torus(m: usize) -> Self {
        let axes = vec![Axis::periodic(0.0, 1.0); m];
        let metric: MatrixFn = Arc::new(move |_x: &DVector<f64>| DMatrix::identity(m, m));
        let mut c = ChartMetric::new(format!("flat_torus_{m}"), axes, metric, 0.5);
        c.metric_derivative = Some(Arc::new(move |_x: &DVector<f64>| vec![DMatrix::zeros(m, m); m]));
        c.flat = true;
        c
    }

    /// The unit round sphere in coordinates `(theta, phi)`, `g = diag(1, sin^2 theta)`.
    /// The poles are excluded from the domain.
    pub fn round_sphere() -> Self {
        let axes = vec![
            Axis::interval(0.0, std::f64::consts::PI),
            Axis::periodic(0.0, 2.0 * std::f64::consts::PI),
        ];
        let metric: MatrixFn = Arc::new(|x: &DVector<f64>| {
            let s = x[0].sin();
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, s * s])
        });
        let deriv: MatrixDerivFn = Arc::new(|x: &DVector<f64>| {
            let s2 = (2.0 * x[0]).sin();
            vec![
                DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, s2]),
                DMatrix::zeros(2, 2),
            ]
        });
        ChartMetric::new("sphere_2", axes, metric, std::f64::consts::PI).with_derivative(deriv)
    }

    /// A metric given entrywise by expressions in `x1..xm`; the matrix is
    /// symmetrized from its upper triangle.
    pub fn from_expressions(
        name: impl Into<String>,
        axes: Vec<Axis>,
        entries: &[Vec<String>],
        injectivity_radius: f64,
    ) -> Result<Self> {
        let m = axes.len();
        if entries.len() != m || entries.iter().any(|r| r.len() != m) {
            return Err(Error::Shape(format!("metric needs {m}x{m} entries")));
        }
        let mut exprs = Vec::new();
        for i in 0..m {
            for j in i..m {
                exprs.push((i, j, Expr::parse(&entries[i][j], m)?));
            }
        }
        for i in 0..m {
            for j in 0..i {
                if entries[i][j].trim() != entries[j][i].trim() {
                    return Err(Error::Invalid(format!(
                        "metric entries ({},{}) and ({},{}) differ",
                        i + 1,
                        j + 1,
                        j + 1,
                        i + 1
                    )));
                }
            }
        }
        let metric: MatrixFn = Arc::new(move |x: &DVector<f64>| {
            let mut g = DMatrix::zeros(m, m);
            for (i, j, e) in &exprs {
                let v = e.eval(x.as_slice()).unwrap_or(f64::NAN);
                g[(*i, *j)] = v;
                g[(*j, *i)] = v;
            }
            g
        });
        Ok(ChartMetric::new(name, axes, metric, injectivity_radius))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn is_flat(&self) -> bool {
        self.flat
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    pub fn injectivity_radius(&self) -> f64 {
        self.injectivity_radius
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter().all(|v| v.is_finite())
            && self
                .axes
                .iter()
                .zip(x.iter())
                .all(|(a, &v)| a.periodic || (v > a.lo && v < a.hi))
    }

    pub fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("point has {} coordinates, chart has {}", x.len(), self.dim())));
        }
        if !self.contains(x) {
            return Err(Error::Domain { point: x.iter().cloned().collect() });
        }
        Ok(())
    }

    /// Metric without the domain check. Used inside finite-difference stencils.
    pub fn metric_raw(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.metric)(x)
    }

    /// Metric at `x`, checked for domain membership and positive definiteness.
    pub fn metric(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let g = self.metric_raw(x);
        if g.clone().cholesky().is_none() {
            return Err(Error::SingularMetric { point: x.iter().cloned().collect() });
        }
        Ok(g)
    }

    /// `d_k g` for each coordinate `k`.
    pub fn metric_derivatives(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        match &self.metric_derivative {
            Some(d) => d(x),
            None => fd_partials(|y| self.metric_raw(y), x, self.fd_step),
        }
    }

    pub fn inner(&self, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        (u.transpose() * self.metric_raw(x) * v)[(0, 0)]
    }

    /// `to - from`, reduced on periodic axes to the representative nearest zero.
    pub fn displacement(&self, from: &DVector<f64>, to: &DVector<f64>) -> DVector<f64> {
        let mut d = to - from;
        for (k, a) in self.axes.iter().enumerate() {
            if a.periodic {
                let p = a.length();
                d[k] -= p * (d[k] / p).round();
            }
        }
        d
    }

    /// Representative of `x` in the fundamental domain.
    pub fn wrap(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = x.clone();
        for (k, a) in self.axes.iter().enumerate() {
            if a.periodic {
                y[k] = a.lo + (y[k] - a.lo).rem_euclid(a.length());
            }
        }
        y
    }

    /// Deterministic Halton samples in the interior of the fundamental domain.
    /// The first `k` points of a longer request coincide with a shorter one.
    pub fn sample_points(&self, count: usize) -> Vec<DVector<f64>> {
        let m = self.dim();
        (1..=count)
            .map(|idx| {
                DVector::from_iterator(
                    m,
                    self.axes.iter().enumerate().map(|(k, a)| {
                        let u = halton(idx, PRIMES[k % PRIMES.len()]);
                        if a.periodic {
                            a.lo + u * a.length()
                        } else {
                            let margin = 1e-3 * a.length();
                            a.lo + margin + u * (a.length() - 2.0 * margin)
                        }
                    }),
                )
            })
            .collect()
    }
}

/// A closed two-form, stored as an exactly antisymmetric matrix field.
#[derive(Clone)]
pub struct ClosedTwoForm {
    dim: usize,
    label: String,
    components: MatrixFn,
    derivative: Option<MatrixDerivFn>,
    fd_step: f64,
    constant: bool,
}

impl fmt::Debug for ClosedTwoForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosedTwoForm")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field("constant", &self.constant)
            .finish()
    }
}

fn antisym_from_upper(m: usize, upper: &[f64]) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in (i + 1)..m {
            w[(i, j)] = upper[k];
            w[(j, i)] = -upper[k];
            k += 1;
        }
    }
    w
}

impl ClosedTwoForm {
    /// A form given by its strictly upper entries `Omega_ij`, `i < j`, in row-major order.
    pub fn from_upper<F>(dim: usize, label: impl Into<String>, upper: F) -> Self
    where
        F: Fn(&DVector<f64>) -> Vec<f64> + Send + Sync + 'static,
    {
        let components: MatrixFn = Arc::new(move |x: &DVector<f64>| antisym_from_upper(dim, &upper(x)));
        ClosedTwoForm {
            dim,
            label: label.into(),
            components,
            derivative: None,
            fd_step: DEFAULT_FD_STEP,
            constant: false,
        }
    }

    /// A form given by an arbitrary matrix field; only the antisymmetric part is kept.
    pub fn from_matrix_fn(dim: usize, label: impl Into<String>, f: MatrixFn) -> Self {
        let components: MatrixFn = Arc::new(move |x: &DVector<f64>| {
            let w = f(x);
            (&w - w.transpose()) * 0.5
        });
        ClosedTwoForm {
            dim,
            label: label.into(),
            components,
            derivative: None,
            fd_step: DEFAULT_FD_STEP,
            constant: false,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant_matrix(&DMatrix::zeros(dim, dim), "zero")
    }

    /// A constant form; only the antisymmetric part of `w` is kept.
    pub fn constant_matrix(w: &DMatrix<f64>, label: impl Into<String>) -> Self {
        let dim = w.nrows();
        let a = (w - w.transpose()) * 0.5;
        let components: MatrixFn = Arc::new(move |_x: &DVector<f64>| a.clone());
        ClosedTwoForm {
            dim,
            label: label.into(),
            components,
            derivative: Some(Arc::new(move |_x: &DVector<f64>| vec![DMatrix::zeros(dim, dim); dim])),
            fd_step: DEFAULT_FD_STEP,
            constant: true,
        }
    }

    /// `b dx1 ^ dx2` on a two-dimensional chart.
    pub fn constant_planar(b: f64) -> Self {
        Self::constant_matrix(&DMatrix::from_row_slice(2, 2, &[0.0, b, -b, 0.0]), format!("constant b={b}"))
    }

    /// `b(x) dx1 ^ dx2` on a two-dimensional chart; closed for any `b`.
    pub fn planar<F>(label: impl Into<String>, b: F) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        Self::from_upper(2, label, move |x| vec![b(x)])
    }

    /// `(b0 + amplitude cos(2 pi x1)) dx1 ^ dx2`.
    pub fn cosine_planar(b0: f64, amplitude: f64) -> Self {
        let tau = 2.0 * std::f64::consts::PI;
        let mut f = Self::planar(format!("b = {b0} + {amplitude} cos(2 pi x1)"), move |x| {
            b0 + amplitude * (tau * x[0]).cos()
        });
        f.derivative = Some(Arc::new(move |x: &DVector<f64>| {
            let d = -amplitude * tau * (tau * x[0]).sin();
            vec![DMatrix::from_row_slice(2, 2, &[0.0, d, -d, 0.0]), DMatrix::zeros(2, 2)]
        }));
        f
    }

    /// `b sin(theta) dtheta ^ dphi`, a constant multiple of the sphere's area form.
    pub fn sphere_area(b: f64) -> Self {
        let mut f = Self::planar(format!("area form b={b}"), move |x| b * x[0].sin());
        f.derivative = Some(Arc::new(move |x: &DVector<f64>| {
            let d = b * x[0].cos();
            vec![DMatrix::from_row_slice(2, 2, &[0.0, d, -d, 0.0]), DMatrix::zeros(2, 2)]
        }));
        f
    }

    /// Entries for `i < j` given as `((i, j), expression)` with 1-based indices.
    pub fn from_expressions(dim: usize, entries: &[((usize, usize), String)]) -> Result<Self> {
        let mut compiled = Vec::new();
        for ((i, j), src) in entries {
            if !(1 <= *i && *i < *j && *j <= dim) {
                return Err(Error::Invalid(format!("form entry ({i},{j}) must satisfy 1 <= i < j <= {dim}")));
            }
            compiled.push((*i - 1, *j - 1, Expr::parse(src, dim)?));
        }
        let components: MatrixFn = Arc::new(move |x: &DVector<f64>| {
            let mut w = DMatrix::zeros(dim, dim);
            for (i, j, e) in &compiled {
                let v = e.eval(x.as_slice()).unwrap_or(f64::NAN);
                w[(*i, *j)] += v;
                w[(*j, *i)] -= v;
            }
            w
        });
        Ok(ClosedTwoForm {
            dim,
            label: "expression".into(),
            components,
            derivative: None,
            fd_step: DEFAULT_FD_STEP,
            constant: false,
        })
    }

    /// `self + other`.
    pub fn sum(&self, other: &ClosedTwoForm) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::Shape("forms of different dimension".into()));
        }
        let a = self.components.clone();
        let b = other.components.clone();
        let derivative = match (&self.derivative, &other.derivative) {
            (Some(da), Some(db)) => {
                let (da, db) = (da.clone(), db.clone());
                Some(Arc::new(move |x: &DVector<f64>| {
                    da(x).into_iter().zip(db(x)).map(|(p, q)| p + q).collect()
                }) as MatrixDerivFn)
            }
            _ => None,
        };
        Ok(ClosedTwoForm {
            dim: self.dim,
            label: format!("{} + {}", self.label, other.label),
            components: Arc::new(move |x: &DVector<f64>| a(x) + b(x)),
            derivative,
            fd_step: self.fd_step.min(other.fd_step),
            constant: self.constant && other.constant,
        })
    }

    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = h;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    pub fn at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.components)(x)
    }

    /// `d_k Omega` for each coordinate `k`.
    pub fn derivatives(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        match &self.derivative {
            Some(d) => d(x),
            None => fd_partials(|y| self.at(y), x, self.fd_step),
        }
    }

    /// `Omega(u, v)`.
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        (u.transpose() * self.at(x) * v)[(0, 0)]
    }
}

/// Christoffel symbols `Gamma^k_ij`, stored as one symmetric matrix per upper index.
#[derive(Clone, Debug)]
pub struct Christoffel {
    pub upper: Vec<DMatrix<f64>>,
}

impl Christoffel {
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.upper[k][(i, j)]
    }

    /// `Gamma(u, v)^k = Gamma^k_ij u^i v^j`.
    pub fn contract(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.upper.len(), self.upper.iter().map(|g| (u.transpose() * g * v)[(0, 0)]))
    }

    /// The matrix `w -> Gamma(u, w)`.
    pub fn contract_left(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let m = self.upper.len();
        let mut out = DMatrix::zeros(m, m);
        for k in 0..m {
            let row = u.transpose() * &self.upper[k];
            out.set_row(k, &row);
        }
        out
    }
}

fn christoffel_raw(chart: &ChartMetric, x: &DVector<f64>) -> Option<Christoffel> {
    let m = chart.dim();
    if chart.is_flat() {
        return Some(Christoffel { upper: vec![DMatrix::zeros(m, m); m] });
    }
    let g = chart.metric_raw(x);
    let ginv = g.try_inverse()?;
    let dg = chart.metric_derivatives(x);
    // first kind: [ij, l] = 1/2 (d_i g_lj + d_j g_li - d_l g_ij)
    let mut first = vec![DMatrix::zeros(m, m); m];
    for l in 0..m {
        for i in 0..m {
            for j in 0..m {
                first[l][(i, j)] = 0.5 * (dg[i][(l, j)] + dg[j][(l, i)] - dg[l][(i, j)]);
            }
        }
    }
    let mut upper = vec![DMatrix::zeros(m, m); m];
    for k in 0..m {
        for l in 0..m {
            let c = ginv[(k, l)];
            if c != 0.0 {
                upper[k] += &first[l] * c;
            }
        }
    }
    Some(Christoffel { upper })
}

pub fn christoffels(chart: &ChartMetric, x: &DVector<f64>) -> Result<Christoffel> {
    chart.metric(x)?;
    christoffel_raw(chart, x).ok_or_else(|| Error::SingularMetric { point: x.iter().cloned().collect() })
}

/// Christoffel symbols without the domain check, for use inside integrators.
pub fn christoffels_unchecked(chart: &ChartMetric, x: &DVector<f64>) -> Result<Christoffel> {
    christoffel_raw(chart, x).ok_or_else(|| Error::SingularMetric { point: x.iter().cloned().collect() })
}

/// Riemann tensor, `data[l][(i, j)]` is a matrix over `k` laid out as
/// `r[l][i][j][k] = dx^l(R(d_i, d_j) d_k)`.
#[derive(Clone, Debug)]
pub struct Riemann {
    dim: usize,
    data: Vec<f64>,
}

impl Riemann {
    fn idx(&self, l: usize, i: usize, j: usize, k: usize) -> usize {
        ((l * self.dim + i) * self.dim + j) * self.dim + k
    }

    pub fn get(&self, l: usize, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(l, i, j, k)]
    }

    /// `R(u, v) w`.
    pub fn apply(&self, u: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let m = self.dim;
        let mut out = DVector::zeros(m);
        for l in 0..m {
            let mut s = 0.0;
            for i in 0..m {
                for j in 0..m {
                    let uv = u[i] * v[j];
                    if uv == 0.0 {
                        continue;
                    }
                    for k in 0..m {
                        s += self.get(l, i, j, k) * uv * w[k];
                    }
                }
            }
            out[l] = s;
        }
        out
    }

    /// `<R(u, v) w, z>` at metric `g`.
    pub fn lowered(&self, g: &DMatrix<f64>, u: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>, z: &DVector<f64>) -> f64 {
        (self.apply(u, v, w).transpose() * g * z)[(0, 0)]
    }
}

pub fn riemann_tensor(chart: &ChartMetric, x: &DVector<f64>) -> Result<Riemann> {
    chart.metric(x)?;
    riemann_unchecked(chart, x)
}

pub fn riemann_unchecked(chart: &ChartMetric, x: &DVector<f64>) -> Result<Riemann> {
    let m = chart.dim();
    if chart.is_flat() {
        return Ok(Riemann { dim: m, data: vec![0.0; m * m * m * m] });
    }
    let gam = christoffels_unchecked(chart, x)?;
    let h = chart.fd_step();
    // dgam[a].upper[l][(j, k)] = d_a Gamma^l_jk
    let mut dgam: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(m);
    for a in 0..m {
        let mut acc = vec![DMatrix::zeros(m, m); m];
        for (o, w) in FD4_OFFSETS.iter().zip(FD4_WEIGHTS.iter()) {
            let mut y = x.clone();
            y[a] += o * h;
            let gy = christoffels_unchecked(chart, &y)?;
            for l in 0..m {
                acc[l] += &gy.upper[l] * (w / h);
            }
        }
        dgam.push(acc);
    }
    let mut r = Riemann { dim: m, data: vec![0.0; m * m * m * m] };
    for l in 0..m {
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let mut v = dgam[i][l][(j, k)] - dgam[j][l][(i, k)];
                    for p in 0..m {
                        v += gam.get(l, i, p) * gam.get(p, j, k) - gam.get(l, j, p) * gam.get(p, i, k);
                    }
                    let id = r.idx(l, i, j, k);
                    r.data[id] = v;
                }
            }
        }
    }
    Ok(r)
}

/// Sectional curvature of the plane spanned by `u, v`.
pub fn sectional_curvature(chart: &ChartMetric, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    let r = riemann_tensor(chart, x)?;
    let g = chart.metric_raw(x);
    let ip = |a: &DVector<f64>, b: &DVector<f64>| (a.transpose() * &g * b)[(0, 0)];
    let den = ip(u, u) * ip(v, v) - ip(u, v).powi(2);
    if den.abs() < 1e-300 {
        return Err(Error::Invalid("degenerate plane".into()));
    }
    Ok(r.lowered(&g, u, v, v, u) / den)
}

/// Lorentz operator `Y = g^{-1} Omega^T`, so that `<Y u, v> = Omega(u, v)`.
pub fn lorentz(chart: &ChartMetric, form: &ClosedTwoForm, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let g = chart.metric(x)?;
    lorentz_with_metric(&g, &form.at(x), x)
}

pub fn lorentz_unchecked(chart: &ChartMetric, form: &ClosedTwoForm, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    lorentz_with_metric(&chart.metric_raw(x), &form.at(x), x)
}

fn lorentz_with_metric(g: &DMatrix<f64>, w: &DMatrix<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let lu = g.clone().lu();
    lu.solve(&w.transpose())
        .ok_or_else(|| Error::SingularMetric { point: x.iter().cloned().collect() })
}

/// `(nabla_k Omega)_ij = d_k Omega_ij - Gamma^l_ki Omega_lj - Gamma^l_kj Omega_il`, one matrix per `k`.
pub fn nabla_form(chart: &ChartMetric, form: &ClosedTwoForm, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
    chart.metric(x)?;
    nabla_form_unchecked(chart, form, x)
}

pub fn nabla_form_unchecked(chart: &ChartMetric, form: &ClosedTwoForm, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
    let m = chart.dim();
    let mut d = form.derivatives(x);
    if chart.is_flat() {
        return Ok(d);
    }
    let gam = christoffels_unchecked(chart, x)?;
    let w = form.at(x);
    for (k, dk) in d.iter_mut().enumerate() {
        // G_k[(l, i)] = Gamma^l_ki
        let mut gk = DMatrix::zeros(m, m);
        for l in 0..m {
            for i in 0..m {
                gk[(l, i)] = gam.get(l, k, i);
            }
        }
        *dk -= gk.transpose() * &w + &w * &gk;
    }
    Ok(d)
}

/// `(nabla_w Omega)` as a matrix, from the per-axis list.
pub fn contract_nabla(nabla: &[DMatrix<f64>], w: &DVector<f64>) -> DMatrix<f64> {
    let m = w.len();
    let mut out = DMatrix::zeros(m, m);
    for (k, nk) in nabla.iter().enumerate() {
        if w[k] != 0.0 {
            out += nk * w[k];
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct ClosednessReport {
    pub samples: usize,
    pub max_residual: f64,
    pub worst_point: Vec<f64>,
}

/// Maximum of `|(d Omega)_ijk|` over Halton samples.
pub fn check_closed(chart: &ChartMetric, form: &ClosedTwoForm, samples: usize) -> ClosednessReport {
    let m = chart.dim();
    let mut worst = 0.0;
    let mut worst_point = vec![];
    for x in chart.sample_points(samples) {
        let d = form.derivatives(&x);
        for i in 0..m {
            for j in (i + 1)..m {
                for k in (j + 1)..m {
                    let r = (d[i][(j, k)] + d[j][(k, i)] + d[k][(i, j)]).abs();
                    if r > worst {
                        worst = r;
                        worst_point = x.iter().cloned().collect();
                    }
                }
            }
        }
    }
    ClosednessReport { samples, max_residual: worst, worst_point }
}

/// Operator norm of `Omega` relative to `g` at one point: the largest singular
/// value of `L^{-1} Omega L^{-T}` with `g = L L^T`.
pub fn form_norm_at(chart: &ChartMetric, form: &ClosedTwoForm, x: &DVector<f64>) -> Result<f64> {
    let g = chart.metric(x)?;
    let l = g
        .cholesky()
        .ok_or_else(|| Error::SingularMetric { point: x.iter().cloned().collect() })?
        .l();
    let linv = l
        .try_inverse()
        .ok_or_else(|| Error::SingularMetric { point: x.iter().cloned().collect() })?;
    let mm = &linv * form.at(x) * linv.transpose();
    // eigenvalues of M M^T rather than an SVD: exact when M M^T is diagonal
    let gram = &mm * mm.transpose();
    Ok(gram.symmetric_eigenvalues().iter().cloned().fold(0.0, f64::max).max(0.0).sqrt())
}

/// Sup-norm estimate of `Omega` over `samples` nested Halton points.
pub fn c0_norm(chart: &ChartMetric, form: &ClosedTwoForm, samples: usize) -> Result<f64> {
    if form.is_constant() && chart.is_flat() && chart.dim() > 0 {
        let x = chart.sample_points(1).remove(0);
        return form_norm_at(chart, form, &x);
    }
    let mut best: f64 = 0.0;
    for x in chart.sample_points(samples.max(1)) {
        best = best.max(form_norm_at(chart, form, &x)?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn sphere_christoffels_match_closed_form() {
        let s = ChartMetric::round_sphere();
        let x = v(&[0.7, 1.1]);
        let g = christoffels(&s, &x).unwrap();
        let (sn, cs) = (0.7f64.sin(), 0.7f64.cos());
        assert_relative_eq!(g.get(0, 1, 1), -sn * cs, epsilon = 1e-12);
        assert_relative_eq!(g.get(1, 0, 1), cs / sn, epsilon = 1e-12);
        assert_relative_eq!(g.get(1, 1, 0), cs / sn, epsilon = 1e-12);
        assert_relative_eq!(g.get(0, 0, 0), 0.0);
    }

    #[test]
    fn sphere_sectional_curvature_is_one() {
        let s = ChartMetric::round_sphere();
        let k = sectional_curvature(&s, &v(&[1.2, 0.3]), &v(&[1.0, 0.0]), &v(&[0.3, 2.0])).unwrap();
        assert_relative_eq!(k, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn fd_metric_derivative_matches_analytic() {
        let s = ChartMetric::round_sphere();
        let fd = ChartMetric::new("fd sphere", s.axes().to_vec(), s.metric.clone(), std::f64::consts::PI);
        let x = v(&[0.4, 2.0]);
        let a = christoffels(&s, &x).unwrap();
        let b = christoffels(&fd, &x).unwrap();
        for k in 0..2 {
            assert!((&a.upper[k] - &b.upper[k]).amax() < 1e-10);
        }
    }

    #[test]
    fn lorentz_of_flat_planar_form() {
        let t = ChartMetric::flat_torus(2);
        let y = lorentz(&t, &ClosedTwoForm::constant_planar(2.0), &v(&[0.1, 0.2])).unwrap();
        assert_eq!(y, DMatrix::from_row_slice(2, 2, &[0.0, -2.0, 2.0, 0.0]));
        // <Y e1, e2> = Omega(e1, e2) = b
        assert_eq!(y[(1, 0)], 2.0);
    }

    #[test]
    fn poles_are_outside_the_sphere_chart() {
        let s = ChartMetric::round_sphere();
        assert!(matches!(s.metric(&v(&[0.0, 1.0])), Err(Error::Domain { .. })));
        assert!(s.metric(&v(&[0.5, 17.0])).is_ok());
    }

    #[test]
    fn area_form_has_unit_relative_norm() {
        let s = ChartMetric::round_sphere();
        let f = ClosedTwoForm::sphere_area(1.5);
        assert_relative_eq!(c0_norm(&s, &f, 64).unwrap(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn area_form_is_parallel_on_the_sphere() {
        let s = ChartMetric::round_sphere();
        let f = ClosedTwoForm::sphere_area(1.0);
        for d in nabla_form(&s, &f, &v(&[0.9, 0.2])).unwrap() {
            assert!(d.amax() < 1e-12);
        }
    }

    #[test]
    fn non_closed_form_is_detected() {
        let t = ChartMetric::flat_torus(3);
        let f = ClosedTwoForm::from_upper(3, "x3 dx1^dx2", |x| vec![x[2], 0.0, 0.0]);
        assert!(check_closed(&t, &f, 8).max_residual > 0.5);
        let g = ClosedTwoForm::from_upper(3, "x1 dx1^dx2", |x| vec![x[0], 0.0, 0.0]);
        assert!(check_closed(&t, &g, 8).max_residual < 1e-9);
    }

    #[test]
    fn displacement_wraps_on_periodic_axes() {
        let t = ChartMetric::flat_torus(2);
        let d = t.displacement(&v(&[0.95, 0.1]), &v(&[3.05, 0.1]));
        assert_relative_eq!(d[0], 0.1, epsilon = 1e-12);
    }
}
