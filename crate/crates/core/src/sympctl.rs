//! The bilinear control system `X' = (A(t) + sum u_ij Ecal(ij)) X` on `Sp(n)`:
//! exact basis matrices, bracket sequences with rank certificates, smooth
//! controls and the End-Point map with its differential.
//!
//! Indices `(i, j)` are zero-based positions in the normal block, so the
//! frame label `E(22)` is `E(0, 0)` here; reports add 2 when printing labels.

use nalgebra::{DMatrix, DVector, Scalar};
use num_traits::{One, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{column_space, commutator, frobenius_inner, simpson_weights, symplectic_j};
use crate::linmap::{hamiltonian_block, LinearSystemCurve, SymplecticMatrix};

/// Relative singular-value threshold for all rank decisions.
pub const RANK_REL_TOL: f64 = 1e-9;
pub const DEFAULT_MODES: usize = 8;
pub const DEFAULT_J_CAP: usize = 4;

/// `BB' - B'B` for any ring of matrix entries.
pub fn bracket<T>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>>
where
    T: Scalar + Zero + One + std::ops::Add<Output = T> + std::ops::Sub<Output = T> + std::ops::Mul<Output = T> + Copy + nalgebra::ClosedAddAssign + nalgebra::ClosedMulAssign + nalgebra::ClosedSubAssign,
{
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(Error::Shape(format!("cannot bracket {:?} with {:?}", a.shape(), b.shape())));
    }
    Ok(a * b - b * a)
}

/// Channel pairs `(i, j)`, `i <= j`, in row-major order.
pub fn channel_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push((i, j));
        }
    }
    out
}

/// `p = n(2n + 1)`.
pub fn sp_dimension(n: usize) -> usize {
    n * (2 * n + 1)
}

/// Integer basis matrices of the control system.
#[derive(Clone, Debug)]
pub struct ControlBasis {
    pub n: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl ControlBasis {
    pub fn new(n: usize) -> Self {
        ControlBasis { n, pairs: channel_pairs(n) }
    }

    pub fn channels(&self) -> usize {
        self.pairs.len()
    }

    /// `(E(ij))_kl = d_ik d_jl + d_il d_jk`.
    pub fn e(&self, i: usize, j: usize) -> DMatrix<i64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        m[(i, j)] += 1;
        m[(j, i)] += 1;
        m
    }

    /// `(F(pq))_rs = d_rp d_sq - d_rq d_sp`.
    pub fn f(&self, p: usize, q: usize) -> DMatrix<i64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        m[(p, q)] += 1;
        m[(q, p)] -= 1;
        m
    }

    /// `[[0, 0], [E(ij), 0]]`.
    pub fn ecal(&self, i: usize, j: usize) -> DMatrix<i64> {
        let n = self.n;
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((n, 0), (n, n)).copy_from(&self.e(i, j));
        m
    }

    /// `Ecal` of the `k`-th channel as a float matrix.
    pub fn ecal_f64(&self, k: usize) -> DMatrix<f64> {
        let (i, j) = self.pairs[k];
        self.ecal(i, j).map(|x| x as f64)
    }

    /// `sum_k w_k E(pairs[k])`.
    pub fn symmetric_combination(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            m[(i, j)] += w[k];
            m[(j, i)] += w[k];
        }
        m
    }
}

/// Basis `Y = -J S_ab` of `T_I Sp(n)`, `S_ab` the elementary symmetric matrices,
/// so `J Y = S_ab` is symmetric with exact integer entries.
pub fn tangent_space_basis(n: usize) -> Vec<DMatrix<f64>> {
    let j = symplectic_j(n);
    let mut out = Vec::with_capacity(sp_dimension(n));
    for a in 0..2 * n {
        for b in a..2 * n {
            let mut s = DMatrix::zeros(2 * n, 2 * n);
            s[(a, b)] = 1.0;
            s[(b, a)] = 1.0;
            out.push(-&j * s);
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct BracketLedger {
    pub n: usize,
    pub identities_checked: usize,
    pub failures: Vec<String>,
}

impl BracketLedger {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

fn kron(a: usize, b: usize) -> i64 {
    (a == b) as i64
}

/// Exact integer verification of the basis identities: the entries of `E`,
/// `F`, `Ecal Ecal = 0`, the bracket formula
/// `[E(ij), E(kl)] = d_il F(jk) + d_jk F(il) + d_ik F(jl) + d_jl F(ik)`,
/// antisymmetry and the Jacobi identity on the `E`.
pub fn bracket_ledger(n: usize) -> BracketLedger {
    let basis = ControlBasis::new(n);
    let mut failures = Vec::new();
    let mut checked = 0;
    let label = |i: usize, j: usize| format!("({}{})", i + 2, j + 2);
    for i in 0..n {
        for j in 0..n {
            let e = basis.e(i, j);
            let f = basis.f(i, j);
            for k in 0..n {
                for l in 0..n {
                    checked += 2;
                    if e[(k, l)] != kron(i, k) * kron(j, l) + kron(i, l) * kron(j, k) {
                        failures.push(format!("entry ({k},{l}) of E{}", label(i, j)));
                    }
                    if f[(k, l)] != kron(k, i) * kron(l, j) - kron(k, j) * kron(l, i) {
                        failures.push(format!("entry ({k},{l}) of F{}", label(i, j)));
                    }
                }
            }
        }
    }
    let zero2 = DMatrix::<i64>::zeros(2 * n, 2 * n);
    for &(i, j) in &basis.pairs {
        for &(k, l) in &basis.pairs {
            checked += 1;
            if basis.ecal(i, j) * basis.ecal(k, l) != zero2 {
                failures.push(format!("Ecal{} Ecal{} != 0", label(i, j), label(k, l)));
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            let eij = basis.e(i, j);
            for k in 0..n {
                for l in 0..n {
                    let ekl = basis.e(k, l);
                    let lhs = bracket(&eij, &ekl).expect("same shape");
                    let rhs = basis.f(j, k) * kron(i, l) + basis.f(i, l) * kron(j, k) + basis.f(j, l) * kron(i, k) + basis.f(i, k) * kron(j, l);
                    checked += 2;
                    if lhs != rhs {
                        failures.push(format!("[E{}, E{}] formula", label(i, j), label(k, l)));
                    }
                    if lhs != -bracket(&ekl, &eij).expect("same shape") {
                        failures.push(format!("antisymmetry of [E{}, E{}]", label(i, j), label(k, l)));
                    }
                }
            }
        }
    }
    // Jacobi identity on a spread of triples
    let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    for (a, &(i, j)) in all.iter().enumerate() {
        let x = basis.e(i, j);
        let y = basis.f(all[(a + 1) % all.len()].0, all[(a + 1) % all.len()].1);
        for &(k, l) in &all {
            let z = basis.e(k, l);
            let jac = bracket(&x, &bracket(&y, &z).unwrap()).unwrap()
                + bracket(&y, &bracket(&z, &x).unwrap()).unwrap()
                + bracket(&z, &bracket(&x, &y).unwrap()).unwrap();
            checked += 1;
            if jac != DMatrix::<i64>::zeros(n, n) {
                failures.push(format!("Jacobi identity at E{}, E{}", label(i, j), label(k, l)));
            }
        }
    }
    BracketLedger { n, identities_checked: checked, failures }
}

/// Rank of a family of matrices with the singular values either side of the
/// cut, for diagnosing certificate failures.
#[derive(Clone, Debug, Serialize)]
pub struct RankInfo {
    pub dim: usize,
    /// Two smallest singular values kept, ascending.
    pub smallest_retained: Vec<f64>,
    /// Two largest singular values discarded, descending.
    pub largest_rejected: Vec<f64>,
}

fn stack(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    if mats.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    let len = mats[0].len();
    DMatrix::from_fn(len, mats.len(), |r, c| mats[c].as_slice()[r])
}

pub fn rank_info(mats: &[DMatrix<f64>]) -> RankInfo {
    if mats.is_empty() {
        return RankInfo { dim: 0, smallest_retained: vec![], largest_rejected: vec![] };
    }
    let mut sv: Vec<f64> = stack(mats).singular_values().iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let smax = sv.first().cloned().unwrap_or(0.0);
    let cut = RANK_REL_TOL * smax;
    let kept: Vec<f64> = sv.iter().cloned().filter(|&s| smax > 0.0 && s > cut).collect();
    let rejected: Vec<f64> = sv.iter().cloned().filter(|&s| !(smax > 0.0 && s > cut)).collect();
    RankInfo {
        dim: kept.len(),
        smallest_retained: kept.iter().rev().take(2).cloned().collect(),
        largest_rejected: rejected.iter().take(2).cloned().collect(),
    }
}

fn orthonormal_span(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    if mats.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    let s = stack(mats);
    let smax = s.clone().singular_values().iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return DMatrix::zeros(s.nrows(), 0);
    }
    column_space(&s, RANK_REL_TOL)
}

fn projection_residual(q: &DMatrix<f64>, m: &DMatrix<f64>) -> f64 {
    let v = DVector::from_column_slice(m.as_slice());
    if q.ncols() == 0 {
        return v.norm();
    }
    (&v - q * (q.transpose() * &v)).norm()
}

/// Closed forms `B^1 = [[-E, 0], [0, E]]` and `B^2 = [[0, -2E], [-EK - KE, 0]]`.
pub fn closed_form_brackets(e: &DMatrix<f64>, k: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = e.nrows();
    let mut b1 = DMatrix::zeros(2 * n, 2 * n);
    b1.view_mut((0, 0), (n, n)).copy_from(&(-e));
    b1.view_mut((n, n), (n, n)).copy_from(e);
    let mut b2 = DMatrix::zeros(2 * n, 2 * n);
    b2.view_mut((0, n), (n, n)).copy_from(&(e * -2.0));
    b2.view_mut((n, 0), (n, n)).copy_from(&(-(e * k) - k * e));
    (b1, b2)
}

fn fd_step(curve: &LinearSystemCurve) -> f64 {
    ((curve.end() - curve.start()) * 1e-3).max(curve.step()).min(1e-2)
}

/// First derivative of `f` at `t`, central when the stencil fits in
/// `[lo, hi]` and one-sided otherwise, all fourth order.
fn derivative<F>(f: &F, t: f64, h: f64, lo: f64, hi: f64) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> Result<DMatrix<f64>>,
{
    if t - 2.0 * h >= lo && t + 2.0 * h <= hi {
        return Ok((f(t - 2.0 * h)? - f(t - h)? * 8.0 + f(t + h)? * 8.0 - f(t + 2.0 * h)?) / (12.0 * h));
    }
    let s = if t - 2.0 * h < lo { 1.0 } else { -1.0 };
    let hs = s * h;
    let w = [-25.0, 48.0, -36.0, 16.0, -3.0];
    let mut acc = f(t)? * w[0];
    for (q, &wq) in w.iter().enumerate().skip(1) {
        acc += f(t + q as f64 * hs)? * wq;
    }
    Ok(acc / (12.0 * hs))
}

fn recursive_bracket(curve: &LinearSystemCurve, b0: &DMatrix<f64>, j: usize, t: f64, h: f64) -> Result<DMatrix<f64>> {
    if j == 0 {
        return Ok(b0.clone());
    }
    let prev = |s: f64| recursive_bracket(curve, b0, j - 1, s, h);
    let d = if j == 1 { DMatrix::zeros(b0.nrows(), b0.ncols()) } else { derivative(&prev, t, h, curve.start(), curve.end())? };
    let a = curve.a_at(t)?;
    Ok(d + commutator(&prev(t)?, &a))
}

/// `B^j_k(t)` for every channel `k` and `j = 0..=jmax`, from the recursion
/// `B^j = d/dt B^{j-1} + B^{j-1} A - A B^{j-1}`. `j <= 2` use the closed forms;
/// higher orders differentiate numerically.
pub fn bracket_sequence(curve: &LinearSystemCurve, jmax: usize, t: f64) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let basis = ControlBasis::new(curve.n());
    let k = curve.k_at(t)?;
    let h = fd_step(curve);
    let mut out = Vec::with_capacity(basis.channels());
    for c in 0..basis.channels() {
        let (i, j) = basis.pairs[c];
        let e = basis.e(i, j).map(|x| x as f64);
        let (b1, b2) = closed_form_brackets(&e, &k);
        let mut seq = vec![basis.ecal_f64(c)];
        if jmax >= 1 {
            seq.push(b1);
        }
        if jmax >= 2 {
            seq.push(b2);
        }
        for jj in 3..=jmax {
            seq.push(recursive_bracket(curve, &basis.ecal_f64(c), jj, t, h)?);
        }
        out.push(seq);
    }
    Ok(out)
}

/// The same sequence computed purely by the recursion, for validating the
/// closed forms.
pub fn bracket_sequence_recursive(curve: &LinearSystemCurve, jmax: usize, t: f64) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let basis = ControlBasis::new(curve.n());
    let h = fd_step(curve);
    (0..basis.channels())
        .map(|c| (0..=jmax).map(|j| recursive_bracket(curve, &basis.ecal_f64(c), j, t, h)).collect())
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct FirstOrderReport {
    pub n: usize,
    pub j_cap: usize,
    pub t: f64,
    pub span_dim: usize,
    pub target_dim: usize,
    pub rank: RankInfo,
    pub pass: bool,
}

/// Rank of `{B^j_k(t) : j <= j_cap}` against `n(2n + 1)`.
pub fn first_order_certificate(curve: &LinearSystemCurve, t: f64, j_cap: usize) -> Result<FirstOrderReport> {
    let seq = bracket_sequence(curve, j_cap, t)?;
    let mats: Vec<DMatrix<f64>> = seq.into_iter().flatten().collect();
    let rank = rank_info(&mats);
    let p = sp_dimension(curve.n());
    Ok(FirstOrderReport { n: curve.n(), j_cap, t, span_dim: rank.dim, target_dim: p, pass: rank.dim == p, rank })
}

/// Exact matrix in row lists, for JSON output.
pub fn rows_i64(m: &DMatrix<i64>) -> Vec<Vec<i64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

pub fn rows_f64(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ChannelBrackets {
    /// Frame labels, e.g. `(2, 3)`.
    pub index: (usize, usize),
    pub b0: Vec<Vec<i64>>,
    pub b1: Vec<Vec<i64>>,
    pub b2: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpanDims {
    pub s1: RankInfo,
    pub s2: RankInfo,
    pub s3: RankInfo,
    pub total: RankInfo,
}

#[derive(Clone, Debug, Serialize)]
pub struct BracketReport {
    pub n: usize,
    pub t: f64,
    pub channels: Vec<ChannelBrackets>,
    /// `Ecal(ij) Ecal(kl) = 0` in exact arithmetic.
    pub products_vanish: bool,
    /// `max` projection residual of `[B^1_k, B_k]` onto `Span{B^0}`.
    pub containment_b1: f64,
    /// `max` projection residual of `[B^2_k, B_k]` onto `Span{B^1}`.
    pub containment_b2: f64,
    pub dims: SpanDims,
    /// Largest `|tr(P^T Q)|` between orthonormal bases of distinct `S_i`.
    pub orthogonality: f64,
    pub expected: (usize, usize, usize, usize),
    pub pass_products: bool,
    pub pass_containment: bool,
    pub pass_dims: bool,
    pub pass_orthogonality: bool,
    pub pass: bool,
}

/// The three sufficient conditions for controllability at second order,
/// checked at `t`: vanishing products, the two containments and the
/// dimensions and mutual orthogonality of `S_1 = Span{B^0, B^2}`,
/// `S_2 = Span{B^1}` and `S_3 = Span{[B^1_k, B^1_l]}`.
pub fn second_order_certificate(curve: &LinearSystemCurve, t: f64) -> Result<BracketReport> {
    let n = curve.n();
    let basis = ControlBasis::new(n);
    let k = curve.k_at(t)?;
    let zero2 = DMatrix::<i64>::zeros(2 * n, 2 * n);
    let mut products_vanish = true;
    for &(i, j) in &basis.pairs {
        for &(p, q) in &basis.pairs {
            products_vanish &= basis.ecal(i, j) * basis.ecal(p, q) == zero2;
        }
    }
    let mut b0 = Vec::new();
    let mut b1 = Vec::new();
    let mut b2 = Vec::new();
    let mut channels = Vec::new();
    for (c, &(i, j)) in basis.pairs.iter().enumerate() {
        let e_int = basis.e(i, j);
        let e = e_int.map(|x| x as f64);
        let ecal = basis.ecal_f64(c);
        let (x1, x2) = closed_form_brackets(&e, &k);
        let mut b1_int = DMatrix::<i64>::zeros(2 * n, 2 * n);
        b1_int.view_mut((0, 0), (n, n)).copy_from(&(-&e_int));
        b1_int.view_mut((n, n), (n, n)).copy_from(&e_int);
        channels.push(ChannelBrackets { index: (i + 2, j + 2), b0: rows_i64(&basis.ecal(i, j)), b1: rows_i64(&b1_int), b2: rows_f64(&x2) });
        b0.push(ecal);
        b1.push(x1);
        b2.push(x2);
    }
    let q0 = orthonormal_span(&b0);
    let q1 = orthonormal_span(&b1);
    let mut containment_b1: f64 = 0.0;
    let mut containment_b2: f64 = 0.0;
    for c in 0..b0.len() {
        containment_b1 = containment_b1.max(projection_residual(&q0, &commutator(&b1[c], &b0[c])));
        containment_b2 = containment_b2.max(projection_residual(&q1, &commutator(&b2[c], &b0[c])));
    }
    let s1: Vec<DMatrix<f64>> = b0.iter().chain(b2.iter()).cloned().collect();
    let s2 = b1.clone();
    let mut s3 = Vec::new();
    for a in 0..b1.len() {
        for b in a + 1..b1.len() {
            s3.push(commutator(&b1[a], &b1[b]));
        }
    }
    let all: Vec<DMatrix<f64>> = s1.iter().chain(s2.iter()).chain(s3.iter()).cloned().collect();
    let dims = SpanDims { s1: rank_info(&s1), s2: rank_info(&s2), s3: rank_info(&s3), total: rank_info(&all) };
    let spans = [orthonormal_span(&s1), orthonormal_span(&s2), orthonormal_span(&s3)];
    let mut orthogonality: f64 = 0.0;
    for a in 0..3 {
        for b in a + 1..3 {
            if spans[a].ncols() > 0 && spans[b].ncols() > 0 {
                orthogonality = orthogonality.max((spans[a].transpose() * &spans[b]).amax());
            }
        }
    }
    let expected = (n * (n + 1), n * (n + 1) / 2, n * n.saturating_sub(1) / 2, sp_dimension(n));
    let pass_products = products_vanish;
    let pass_containment = containment_b1 <= 1e-10 && containment_b2 <= 1e-10;
    let pass_dims = dims.s1.dim == expected.0 && dims.s2.dim == expected.1 && dims.s3.dim >= expected.2 && dims.total.dim == expected.3;
    let pass_orthogonality = orthogonality <= 1e-10;
    Ok(BracketReport {
        n,
        t,
        channels,
        products_vanish,
        containment_b1,
        containment_b2,
        dims,
        orthogonality,
        expected,
        pass_products,
        pass_containment,
        pass_dims,
        pass_orthogonality,
        pass: pass_products && pass_containment && pass_dims && pass_orthogonality,
    })
}

/// `exp(1 - 1/(4 s (1 - s)))` on `(0, 1)`: equal to 1 at `s = 1/2` and flat to
/// all orders at both ends. Returns the value and two derivatives in `s`.
pub fn window(s: f64) -> (f64, f64, f64) {
    if !(s > 0.0 && s < 1.0) {
        return (0.0, 0.0, 0.0);
    }
    let q = 4.0 * s * (1.0 - s);
    let qp = 4.0 - 8.0 * s;
    let qpp = -8.0;
    let w = (1.0 - 1.0 / q).exp();
    let w1 = w * qp / (q * q);
    let w2 = w * (qp * qp / q.powi(4) + qpp / (q * q) - 2.0 * qp * qp / q.powi(3));
    (w, w1, w2)
}

/// Controls `u_k(t) = w(s) sum_q c_kq sin(q pi s)`, `s = (t - a)/(b - a)`, on a
/// support `[a, b]`; identically zero outside.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlVector {
    n: usize,
    modes: usize,
    support: (f64, f64),
    coeffs: DMatrix<f64>,
}

impl ControlVector {
    pub fn zeros(n: usize, modes: usize, support: (f64, f64)) -> Result<Self> {
        if !(support.1 > support.0) || modes == 0 || n == 0 {
            return Err(Error::Invalid("controls need n >= 1, modes >= 1 and a non-empty support".into()));
        }
        Ok(ControlVector { n, modes, support, coeffs: DMatrix::zeros(n * (n + 1) / 2, modes) })
    }

    /// Coefficients as a `channels x modes` matrix.
    pub fn from_coefficients(n: usize, support: (f64, f64), coeffs: DMatrix<f64>) -> Result<Self> {
        let mut c = Self::zeros(n, coeffs.ncols().max(1), support)?;
        if coeffs.nrows() != c.channels() {
            return Err(Error::Shape(format!("expected {} channels, got {}", c.channels(), coeffs.nrows())));
        }
        c.coeffs = coeffs;
        Ok(c)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn channels(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn parameter_count(&self) -> usize {
        self.coeffs.len()
    }

    /// Coefficients flattened channel by channel.
    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.coeffs.len(), (0..self.channels()).flat_map(|k| self.coeffs.row(k).iter().cloned().collect::<Vec<_>>()))
    }

    pub fn with_vector(&self, v: &DVector<f64>) -> Result<Self> {
        if v.len() != self.coeffs.len() {
            return Err(Error::Shape("coefficient vector has the wrong length".into()));
        }
        let mut c = self.clone();
        for k in 0..self.channels() {
            for q in 0..self.modes {
                c.coeffs[(k, q)] = v[k * self.modes + q];
            }
        }
        Ok(c)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut c = self.clone();
        c.coeffs *= s;
        c
    }

    pub fn add(&self, other: &ControlVector, s: f64) -> Result<Self> {
        if self.coeffs.shape() != other.coeffs.shape() || self.support != other.support {
            return Err(Error::Shape("controls have different layouts".into()));
        }
        let mut c = self.clone();
        c.coeffs += &other.coeffs * s;
        Ok(c)
    }

    /// Basis function `w(s) sin(q pi s)` of mode `q` (zero-based) with up to
    /// two time derivatives.
    fn mode(&self, q: usize, t: f64) -> (f64, f64, f64) {
        let (a, b) = self.support;
        let len = b - a;
        let s = (t - a) / len;
        let (w, w1, w2) = window(s);
        if w == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let k = (q + 1) as f64 * std::f64::consts::PI;
        let (sn, cs) = (k * s).sin_cos();
        let v = w * sn;
        let d1 = w1 * sn + w * k * cs;
        let d2 = w2 * sn + 2.0 * w1 * k * cs - w * k * k * sn;
        (v, d1 / len, d2 / (len * len))
    }

    /// `(u, u', u'')` of channel `k` at `t`.
    pub fn channel_derivatives(&self, k: usize, t: f64) -> (f64, f64, f64) {
        let mut out = (0.0, 0.0, 0.0);
        for q in 0..self.modes {
            let c = self.coeffs[(k, q)];
            if c != 0.0 {
                let (v, d1, d2) = self.mode(q, t);
                out.0 += c * v;
                out.1 += c * d1;
                out.2 += c * d2;
            }
        }
        out
    }

    pub fn channel(&self, k: usize, t: f64) -> f64 {
        self.channel_derivatives(k, t).0
    }

    /// All channels at `t`.
    pub fn values(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.channels(), (0..self.channels()).map(|k| self.channel(k, t)))
    }

    fn norm_grid(&self) -> Vec<f64> {
        let (a, b) = self.support;
        let pts = 64 * self.modes + 1;
        (0..pts).map(|i| a + (b - a) * i as f64 / (pts - 1) as f64).collect()
    }

    /// `sqrt(sum_k integral u_k^2)`.
    pub fn l2_norm(&self) -> f64 {
        let grid = self.norm_grid();
        let w = simpson_weights(grid.len() - 1, grid[1] - grid[0]);
        let mut acc = 0.0;
        for (t, wt) in grid.iter().zip(&w) {
            acc += wt * self.values(*t).norm_squared();
        }
        acc.sqrt()
    }

    /// `max_k sup |u_k|` on a sampling grid.
    pub fn c0_norm(&self) -> f64 {
        self.norm_grid().iter().map(|&t| self.values(t).amax()).fold(0.0, f64::max)
    }

    /// `max_k max(sup|u|, sup|u'|, sup|u''|)` on a sampling grid.
    pub fn c2_norm(&self) -> f64 {
        let mut m: f64 = 0.0;
        for &t in &self.norm_grid() {
            for k in 0..self.channels() {
                let (a, b, c) = self.channel_derivatives(k, t);
                m = m.max(a.abs()).max(b.abs()).max(c.abs());
            }
        }
        m
    }
}

fn control_generator(curve: &LinearSystemCurve, basis: &ControlBasis, ecal: &[DMatrix<f64>], u: &ControlVector, t: f64) -> Result<DMatrix<f64>> {
    let mut a = curve.a_at(t)?;
    let vals = u.values(t);
    for c in 0..basis.channels() {
        if vals[c] != 0.0 {
            a += &ecal[c] * vals[c];
        }
    }
    Ok(a)
}

fn check_controls(curve: &LinearSystemCurve, u: &ControlVector) -> Result<()> {
    if u.n() != curve.n() {
        return Err(Error::Shape(format!("controls are for n = {} but the curve has n = {}", u.n(), curve.n())));
    }
    Ok(())
}

fn grid_steps(curve: &LinearSystemCurve, t: f64) -> Result<usize> {
    if t < curve.start() - 1e-12 || t > curve.end() + 1e-9 * curve.step() {
        return Err(Error::OutsideGrid { time: t, start: curve.start(), end: curve.end() });
    }
    let ratio = (t - curve.start()) / curve.step();
    if (ratio - ratio.round()).abs() > 1e-6 {
        return Err(Error::Shape(format!("time {t} is not on the quadrature grid")));
    }
    Ok(ratio.round() as usize)
}

/// `S(t_k)` for the controlled generator on the grid up to `T`, with the
/// fourth-order Magnus method.
fn fundamental_matrices(curve: &LinearSystemCurve, u: &ControlVector, t_end: f64) -> Result<Vec<DMatrix<f64>>> {
    let steps = grid_steps(curve, t_end)?;
    let basis = ControlBasis::new(curve.n());
    let ecal: Vec<DMatrix<f64>> = (0..basis.channels()).map(|c| basis.ecal_f64(c)).collect();
    let n2 = 2 * curve.n();
    let h = curve.step();
    let r = 3f64.sqrt() / 6.0;
    let mut s = DMatrix::identity(n2, n2);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(s.clone());
    for i in 0..steps {
        let t = curve.start() + i as f64 * h;
        let a1 = control_generator(curve, &basis, &ecal, u, t + (0.5 - r) * h)?;
        let a2 = control_generator(curve, &basis, &ecal, u, t + (0.5 + r) * h)?;
        let om = (&a1 + &a2) * (0.5 * h) + commutator(&a2, &a1) * (3f64.sqrt() / 12.0 * h * h);
        s = om.exp() * s;
        out.push(s.clone());
    }
    Ok(out)
}

/// `X(T)` for `X' = (A + sum u_k Ecal_k) X`, `X(t0) = Xbar`.
pub fn end_point(xbar: &SymplecticMatrix, curve: &LinearSystemCurve, u: &ControlVector, t_end: f64) -> Result<SymplecticMatrix> {
    check_controls(curve, u)?;
    let s = fundamental_matrices(curve, u, t_end)?;
    SymplecticMatrix::new(s.last().expect("non-empty") * xbar.entries())
}

/// `S(T) integral S(t)^{-1} G(t) S(t) dt`-type kernels for every channel on the
/// grid: returns `K_c(t_k) = S(T) S(t_k)^{-1} Ecal_c S(t_k) Xbar` and the Simpson weights.
fn differential_kernels(xbar: &SymplecticMatrix, curve: &LinearSystemCurve, ubar: &ControlVector, t_end: f64) -> Result<(Vec<f64>, Vec<Vec<DMatrix<f64>>>, Vec<f64>)> {
    check_controls(curve, ubar)?;
    let s = fundamental_matrices(curve, ubar, t_end)?;
    let steps = s.len() - 1;
    let basis = ControlBasis::new(curve.n());
    let ecal: Vec<DMatrix<f64>> = (0..basis.channels()).map(|c| basis.ecal_f64(c)).collect();
    let st = s[steps].clone();
    let n = curve.n();
    let j = symplectic_j(n);
    let mut times = Vec::with_capacity(steps + 1);
    let mut kernels = vec![Vec::with_capacity(steps + 1); basis.channels()];
    for (k, sk) in s.iter().enumerate() {
        // S^{-1} = -J S^T J for symplectic S
        let inv = -&j * sk.transpose() * &j;
        let left = &st * inv;
        let right = sk * xbar.entries();
        for c in 0..basis.channels() {
            kernels[c].push(&left * &ecal[c] * &right);
        }
        times.push(curve.start() + k as f64 * curve.step());
    }
    Ok((times, kernels, simpson_weights(steps, curve.step())))
}

/// `D_ubar E . v = sum_k S(T) int v_k(t) S(t)^{-1} Ecal_k X(t) dt` by composite
/// Simpson quadrature on the curve grid.
pub fn end_point_differential(xbar: &SymplecticMatrix, curve: &LinearSystemCurve, ubar: &ControlVector, v: &ControlVector, t_end: f64) -> Result<DMatrix<f64>> {
    check_controls(curve, v)?;
    let (times, kernels, w) = differential_kernels(xbar, curve, ubar, t_end)?;
    let n2 = 2 * curve.n();
    let mut acc = DMatrix::zeros(n2, n2);
    for (k, t) in times.iter().enumerate() {
        let vals = v.values(*t);
        for c in 0..vals.len() {
            if vals[c] != 0.0 {
                acc += &kernels[c][k] * (w[k] * vals[c]);
            }
        }
    }
    Ok(acc)
}

/// Jacobian of the End-Point map with respect to the flattened coefficients
/// of `ubar`'s layout: column `i` is `vec(D E . basis_i)`.
pub fn end_point_jacobian(xbar: &SymplecticMatrix, curve: &LinearSystemCurve, ubar: &ControlVector, t_end: f64) -> Result<DMatrix<f64>> {
    let (times, kernels, w) = differential_kernels(xbar, curve, ubar, t_end)?;
    let n2 = 2 * curve.n();
    let modes = ubar.modes();
    let mut jac = DMatrix::zeros(n2 * n2, ubar.parameter_count());
    let mut unit = ControlVector::zeros(ubar.n(), modes, ubar.support())?;
    for c in 0..ubar.channels() {
        for q in 0..modes {
            unit.coeffs.fill(0.0);
            unit.coeffs[(c, q)] = 1.0;
            let mut acc = DMatrix::zeros(n2, n2);
            for (k, t) in times.iter().enumerate() {
                let phi = unit.channel(c, *t);
                if phi != 0.0 {
                    acc += &kernels[c][k] * (w[k] * phi);
                }
            }
            jac.set_column(c * modes + q, &DVector::from_column_slice(acc.as_slice()));
        }
    }
    Ok(jac)
}

/// `max |M - M^T|` for `M = J D X(T)^{-1}`; zero when `D` is tangent to
/// `Sp(n)` at `X(T)`.
pub fn tangency_defect(d: &DMatrix<f64>, x_end: &SymplecticMatrix) -> f64 {
    let j = symplectic_j(x_end.n());
    let m = &j * d * x_end.inverse().entries();
    (&m - m.transpose()).amax()
}

/// `tr(P^T Q)` between two families, for orthogonality reports.
pub fn max_cross_inner(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for p in a {
        for q in b {
            m = m.max(frobenius_inner(p, q).abs());
        }
    }
    m
}

/// `A(t)` as used by the control system.
pub fn drift_matrix(curve: &LinearSystemCurve, t: f64) -> Result<DMatrix<f64>> {
    Ok(hamiltonian_block(&curve.k_at(t)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tangent_basis_sizes_and_structure() {
        for (n, p) in [(1, 3), (2, 10), (3, 21)] {
            let b = tangent_space_basis(n);
            assert_eq!(b.len(), p);
            let j = symplectic_j(n);
            for y in &b {
                let jy = &j * y;
                assert_eq!(&jy - jy.transpose(), DMatrix::zeros(2 * n, 2 * n));
            }
        }
    }

    #[test]
    fn e22_e23_bracket() {
        let b = ControlBasis::new(2);
        assert_eq!(bracket(&b.e(0, 0), &b.e(0, 1)).unwrap(), b.f(0, 1) * 2);
        let x = b.e(1, 1);
        assert_eq!(bracket(&x, &x).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn bracket_rejects_shape_mismatch() {
        assert!(bracket(&DMatrix::<i64>::zeros(2, 2), &DMatrix::<i64>::zeros(3, 3)).is_err());
    }

    #[test]
    fn ledger_small_n() {
        for n in 1..=3 {
            let l = bracket_ledger(n);
            assert!(l.pass(), "{:?}", l.failures);
        }
    }

    #[test]
    fn zero_curvature_second_bracket() {
        let c = LinearSystemCurve::constant(DMatrix::zeros(2, 2), 1.0, 0.01).unwrap();
        let seq = bracket_sequence(&c, 2, 0.0).unwrap();
        let b = ControlBasis::new(2);
        for (k, s) in seq.iter().enumerate() {
            let (i, j) = b.pairs[k];
            let mut expect = DMatrix::zeros(4, 4);
            expect.view_mut((0, 2), (2, 2)).copy_from(&(b.e(i, j).map(|x| x as f64) * -2.0));
            assert_eq!(s[2], expect);
        }
    }

    #[test]
    fn first_order_examples() {
        let flat = LinearSystemCurve::constant(DMatrix::zeros(1, 1), 1.0, 0.01).unwrap();
        let r = first_order_certificate(&flat, 0.0, 0).unwrap();
        assert_eq!((r.span_dim, r.pass), (1, false));
        let circle = LinearSystemCurve::constant(DMatrix::identity(1, 1), 1.0, 0.01).unwrap();
        let r = first_order_certificate(&circle, 0.0, DEFAULT_J_CAP).unwrap();
        assert_eq!((r.span_dim, r.pass), (3, true));
    }

    #[test]
    fn recursion_matches_closed_forms() {
        let c = LinearSystemCurve::from_fn(2, 0.0, 1.0, 1e-3, |t| {
            DMatrix::from_row_slice(2, 2, &[1.0 + t.sin(), 0.3 * t, 0.3 * t, -0.5 + t * t])
        })
        .unwrap();
        for &t in &[0.0, 0.4, 1.0] {
            let a = bracket_sequence(&c, 2, t).unwrap();
            let b = bracket_sequence_recursive(&c, 2, t).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (p, q) in x.iter().zip(y) {
                    assert!((p - q).amax() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn second_order_n1_and_n2() {
        let c1 = LinearSystemCurve::constant(DMatrix::identity(1, 1) * 0.7, 1.0, 0.01).unwrap();
        let r = second_order_certificate(&c1, 0.0).unwrap();
        assert!(r.pass);
        assert_eq!((r.dims.s1.dim, r.dims.s2.dim, r.dims.s3.dim, r.dims.total.dim), (2, 1, 0, 3));
        let k = DMatrix::from_row_slice(2, 2, &[0.4, -1.2, -1.2, 2.0]);
        let r = second_order_certificate(&LinearSystemCurve::constant(k, 1.0, 0.01).unwrap(), 0.0).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!((r.dims.s1.dim, r.dims.s2.dim, r.dims.total.dim), (6, 3, 10));
        assert!(r.dims.s3.dim >= 1);
    }

    #[test]
    fn bracket_with_b1_is_twice_e_squared() {
        let b = ControlBasis::new(2);
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, -1.0]);
        for &(i, j) in &b.pairs {
            let e = b.e(i, j).map(|x| x as f64);
            let (b1, _) = closed_form_brackets(&e, &k);
            let ecal = b.ecal(i, j).map(|x| x as f64);
            let mut expect = DMatrix::zeros(4, 4);
            expect.view_mut((2, 0), (2, 2)).copy_from(&(&e * &e * 2.0));
            assert_eq!(commutator(&b1, &ecal), expect);
        }
    }

    #[test]
    fn window_is_smooth_and_supported() {
        assert_eq!(window(0.0), (0.0, 0.0, 0.0));
        assert_eq!(window(1.0), (0.0, 0.0, 0.0));
        assert_relative_eq!(window(0.5).0, 1.0);
        let h = 1e-5;
        for &s in &[0.2, 0.45, 0.8] {
            let fd1 = (window(s + h).0 - window(s - h).0) / (2.0 * h);
            let fd2 = (window(s + h).1 - window(s - h).1) / (2.0 * h);
            assert_relative_eq!(window(s).1, fd1, epsilon = 1e-6);
            assert_relative_eq!(window(s).2, fd2, epsilon = 1e-5);
        }
        assert!(window(1e-3).0 < 1e-100);
    }

    #[test]
    fn zero_control_is_free_propagation() {
        let c = LinearSystemCurve::constant(DMatrix::identity(1, 1), 1.0, 1e-3).unwrap();
        let u = ControlVector::zeros(1, 4, (0.0, 1.0)).unwrap();
        let x = end_point(&SymplecticMatrix::identity(1), &c, &u, 1.0).unwrap();
        let w = crate::linmap::propagate(&c, &DMatrix::identity(2, 2), 1.0).unwrap();
        assert!((x.entries() - w).amax() < 1e-13);
        let d = end_point_differential(&SymplecticMatrix::identity(1), &c, &u, &u, 1.0).unwrap();
        assert_eq!(d.amax(), 0.0);
    }
}
