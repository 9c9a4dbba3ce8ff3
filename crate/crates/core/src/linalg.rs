//! Small dense linear-algebra helpers shared by the modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// The standard symplectic matrix `[[0, I], [-I, 0]]` of size `2n`.
pub fn symplectic_j(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

/// `||P^T J P - J||_F`.
pub fn symplectic_defect(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows() / 2;
    let j = symplectic_j(n);
    (p.transpose() * &j * p - j).norm()
}

/// Frobenius inner product `tr(A^T B)`.
pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// `AB - BA`.
pub fn commutator(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a * b - b * a
}

/// Numerical rank with singular values compared against `rel * s_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel * smax).count()
}

/// Minimum-norm least-squares solution of `A x = b` with relative cutoff.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel: f64) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = (rel * smax).max(f64::MIN_POSITIVE);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut x = DVector::zeros(a.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > eps {
            let coeff = u.column(k).dot(b) / s;
            x += vt.row(k).transpose() * coeff;
        }
    }
    x
}

/// Radical inverse of `index` in `base`: one coordinate of a Halton point.
pub fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

pub const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Fourth-order central difference weights at offsets `-2h, -h, h, 2h`.
pub const FD4_OFFSETS: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];
pub const FD4_WEIGHTS: [f64; 4] = [1.0 / 12.0, -8.0 / 12.0, 8.0 / 12.0, -1.0 / 12.0];

/// Classical RK4 step for an autonomous system on a flat vector.
pub fn rk4_step<F>(f: &F, y: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = f(y)?;
    let k2 = f(&(y + &k1 * (0.5 * h)))?;
    let k3 = f(&(y + &k2 * (0.5 * h)))?;
    let k4 = f(&(y + &k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Gram-Schmidt with respect to the inner product `g`, starting from `first`
/// and completing with coordinate axes. Columns of the result are g-orthonormal.
pub fn complete_orthonormal(g: &DMatrix<f64>, first: &DVector<f64>) -> Result<DMatrix<f64>> {
    let m = g.nrows();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(m);
    let inner = |a: &DVector<f64>, b: &DVector<f64>| (a.transpose() * g * b)[(0, 0)];
    let n0 = inner(first, first).sqrt();
    if !(n0 > 0.0) {
        return Err(Error::Invalid("cannot build a frame from a zero vector".into()));
    }
    cols.push(first / n0);
    for axis in 0..m {
        if cols.len() == m {
            break;
        }
        let mut w = DVector::zeros(m);
        w[axis] = 1.0;
        for _ in 0..2 {
            for c in &cols {
                let p = inner(c, &w);
                w -= c * p;
            }
        }
        let nw = inner(&w, &w).sqrt();
        if nw > 1e-8 {
            cols.push(w / nw);
        }
    }
    if cols.len() != m {
        return Err(Error::Singular("frame completion failed".into()));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Matrix sign function by the scaled Newton iteration.
pub fn matrix_sign(c: &DMatrix<f64>, max_iter: usize) -> Result<DMatrix<f64>> {
    let mut x = c.clone();
    for _ in 0..max_iter {
        let inv = x
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotHyperbolic("sign iteration met a singular iterate".into()))?;
        let det_scale = {
            let a = x.norm();
            let b = inv.norm();
            if a > 0.0 && b > 0.0 {
                (b / a).sqrt()
            } else {
                1.0
            }
        };
        let next = (&x * det_scale + inv / det_scale) * 0.5;
        let diff = (&next - &x).norm();
        x = next;
        if diff <= 1e-13 * x.norm().max(1.0) {
            let inv = x.clone().try_inverse().unwrap_or_else(|| x.clone());
            return Ok((&x + inv) * 0.5);
        }
    }
    Err(Error::NoConvergence {
        what: "matrix sign iteration",
        iterations: max_iter,
        residual: (&x * &x - DMatrix::identity(x.nrows(), x.nrows())).norm(),
    })
}

/// Orthonormal basis for the column space of `m`, via SVD.
pub fn column_space(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let u = svd.u.expect("u requested");
    let cols: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > rel * smax)
        .map(|(k, _)| u.column(k).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(m.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Four-point Lagrange interpolation on a uniform grid with samples `ys`.
pub fn lagrange_uniform<T>(t0: f64, h: f64, ys: &[T], t: f64) -> T
where
    T: Clone + std::ops::Mul<f64, Output = T> + std::ops::Add<T, Output = T>,
{
    let n = ys.len();
    assert!(n >= 1);
    if n < 4 {
        let s = ((t - t0) / h).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n.saturating_sub(2));
        if n == 1 {
            return ys[0].clone();
        }
        let w = s - i as f64;
        return ys[i].clone() * (1.0 - w) + ys[i + 1].clone() * w;
    }
    let s = (t - t0) / h;
    let base = (s.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
    let nodes: [f64; 4] = [0.0, 1.0, 2.0, 3.0].map(|k| base as f64 + k);
    let mut acc: Option<T> = None;
    for a in 0..4 {
        let mut w = 1.0;
        for b in 0..4 {
            if a != b {
                w *= (s - nodes[b]) / (nodes[a] - nodes[b]);
            }
        }
        let term = ys[base + a].clone() * w;
        acc = Some(match acc {
            None => term,
            Some(x) => x + term,
        });
    }
    acc.expect("four nodes")
}

/// Composite Simpson weights for `n` intervals on a uniform grid. For odd
/// `n >= 3` the last three intervals use the 3/8 rule; `n = 1` is a trapezoid.
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; n + 1];
    if n == 0 {
        return w;
    }
    if n == 1 {
        w[0] = h / 2.0;
        w[1] = h / 2.0;
        return w;
    }
    let even = if n % 2 == 0 { n } else { n - 3 };
    for k in (0..even).step_by(2) {
        w[k] += h / 3.0;
        w[k + 1] += 4.0 * h / 3.0;
        w[k + 2] += h / 3.0;
    }
    if n % 2 == 1 {
        let s = even;
        w[s] += 3.0 * h / 8.0;
        w[s + 1] += 9.0 * h / 8.0;
        w[s + 2] += 9.0 * h / 8.0;
        w[s + 3] += 3.0 * h / 8.0;
    }
    w
}
