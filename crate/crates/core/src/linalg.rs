//! Dense and sparse linear algebra shared by the normal form and the dynamics:
//! a real/complex scalar abstraction over faer, Hermitian eigensolves, the
//! matrix exponential, CSR matrices, optimal assignment and power-law fits.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{GiqsError, Result};

/// Field of matrix entries: `f64` for real symmetric problems, `Complex64` otherwise.
pub trait Scalar:
    faer::traits::ComplexField<Real = f64>
    + Copy
    + Send
    + Sync
    + Debug
    + PartialEq
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const IS_COMPLEX: bool;
    fn zero() -> Self;
    fn one() -> Self;
    fn from_re(x: f64) -> Self;
    /// `None` when the scalar type cannot represent a nonzero imaginary part.
    fn from_c64(z: Complex64) -> Option<Self>;
    fn to_c64(self) -> Complex64;
    fn re(self) -> f64;
    fn conj(self) -> Self;
    fn abs(self) -> f64;
    fn norm_sqr(self) -> f64;
    fn scale(self, s: f64) -> Self {
        self * Self::from_re(s)
    }
}

impl Scalar for f64 {
    const IS_COMPLEX: bool = false;
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_re(x: f64) -> Self {
        x
    }
    fn from_c64(z: Complex64) -> Option<Self> {
        (z.im == 0.0).then_some(z.re)
    }
    fn to_c64(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }
    fn re(self) -> f64 {
        self
    }
    fn conj(self) -> Self {
        self
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn norm_sqr(self) -> f64 {
        self * self
    }
}

impl Scalar for Complex64 {
    const IS_COMPLEX: bool = true;
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn from_re(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn from_c64(z: Complex64) -> Option<Self> {
        Some(z)
    }
    fn to_c64(self) -> Complex64 {
        self
    }
    fn re(self) -> f64 {
        self.re
    }
    fn conj(self) -> Self {
        Complex64::conj(&self)
    }
    fn abs(self) -> f64 {
        self.norm()
    }
    fn norm_sqr(self) -> f64 {
        Complex64::norm_sqr(&self)
    }
}

pub fn frobenius<T: Scalar>(a: &Mat<T>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)].norm_sqr();
        }
    }
    s.sqrt()
}

/// Conjugate transpose.
pub fn adjoint<T: Scalar>(a: &Mat<T>) -> Mat<T> {
    Mat::from_fn(a.ncols(), a.nrows(), |i, j| a[(j, i)].conj())
}

/// `‖A − A†‖_F / max(‖A‖_F, tiny)`.
pub fn hermitian_defect<T: Scalar>(a: &Mat<T>) -> f64 {
    let n = a.nrows();
    let mut diff = 0.0;
    for j in 0..n {
        for i in 0..n {
            diff += (a[(i, j)] - a[(j, i)].conj()).norm_sqr();
        }
    }
    diff.sqrt() / frobenius(a).max(f64::MIN_POSITIVE)
}

/// Replaces `A` by `(A + A†)/2`.
pub fn symmetrize<T: Scalar>(a: &mut Mat<T>) {
    let n = a.nrows();
    for j in 0..n {
        for i in 0..=j {
            let v = (a[(i, j)] + a[(j, i)].conj()).scale(0.5);
            a[(i, j)] = v;
            a[(j, i)] = v.conj();
        }
    }
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn eigvalsh<T: Scalar>(a: &Mat<T>) -> Result<Vec<f64>> {
    a.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| GiqsError::LinearAlgebra(format!("{e:?}")))
}

/// Eigen-decomposition of a Hermitian matrix: ascending eigenvalues and the
/// unitary matrix of eigenvectors (columns).
pub fn eigh<T: Scalar>(a: &Mat<T>) -> Result<(Vec<f64>, Mat<T>)> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| GiqsError::LinearAlgebra(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let vals = (0..a.nrows()).map(|i| s[i].re()).collect();
    Ok((vals, evd.U().to_owned()))
}

fn one_norm<T: Scalar>(a: &Mat<T>) -> f64 {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn add_scaled_identity<T: Scalar>(a: &mut Mat<T>, c: f64) {
    for i in 0..a.nrows() {
        a[(i, i)] += T::from_re(c);
    }
}

fn lin_comb<T: Scalar>(terms: &[(f64, &Mat<T>)], n: usize) -> Mat<T> {
    Mat::from_fn(n, n, |i, j| {
        let mut s = T::zero();
        for (c, m) in terms {
            s += m[(i, j)].scale(*c);
        }
        s
    })
}

/// Matrix exponential by scaling and squaring around a [13/13] Padé approximant.
pub fn expm<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(GiqsError::invalid("expm needs a square matrix"));
    }
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let theta13 = 5.371920351148152;
    let norm = one_norm(a);
    let s = if norm > theta13 {
        (norm / theta13).log2().ceil() as i32
    } else {
        0
    };
    let factor = 0.5f64.powi(s);
    let a1 = Mat::from_fn(n, n, |i, j| a[(i, j)].scale(factor));
    let a2 = &a1 * &a1;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = PADE13;
    let mut u_inner = lin_comb(&[(b[13], &a6), (b[11], &a4), (b[9], &a2)], n);
    u_inner = &a6 * &u_inner;
    let mut u_tail = lin_comb(&[(b[7], &a6), (b[5], &a4), (b[3], &a2)], n);
    add_scaled_identity(&mut u_tail, b[1]);
    let u_sum = lin_comb(&[(1.0, &u_inner), (1.0, &u_tail)], n);
    let u = &a1 * &u_sum;
    let mut v = &a6 * &lin_comb(&[(b[12], &a6), (b[10], &a4), (b[8], &a2)], n);
    let mut v_tail = lin_comb(&[(b[6], &a6), (b[4], &a4), (b[2], &a2)], n);
    add_scaled_identity(&mut v_tail, b[0]);
    v = lin_comb(&[(1.0, &v), (1.0, &v_tail)], n);
    let p = lin_comb(&[(1.0, &v), (1.0, &u)], n);
    let q = lin_comb(&[(1.0, &v), (-1.0, &u)], n);
    let mut r = q.partial_piv_lu().solve(&p);
    for _ in 0..s {
        r = &r * &r;
    }
    if (0..n).any(|i| (0..n).any(|j| !r[(i, j)].re().is_finite())) {
        return Err(GiqsError::LinearAlgebra("expm produced non-finite entries".into()));
    }
    Ok(r)
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct Csr<T> {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    /// Builds from triplets; duplicate entries are summed, exact zeros dropped.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trip: Vec<(usize, usize, T)>) -> Self {
        trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col = Vec::with_capacity(trip.len());
        let mut val: Vec<T> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        let mut rows = Vec::with_capacity(trip.len());
        for (i, j, v) in trip {
            if last == Some((i, j)) {
                *val.last_mut().expect("nonempty") += v;
            } else {
                rows.push(i);
                col.push(j);
                val.push(v);
                last = Some((i, j));
            }
        }
        let mut keep_col = Vec::with_capacity(col.len());
        let mut keep_val = Vec::with_capacity(val.len());
        for ((i, j), v) in rows.into_iter().zip(col).zip(val) {
            if v != T::zero() {
                row_ptr[i + 1] += 1;
                keep_col.push(j);
                keep_val.push(v);
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr {
            nrows,
            ncols,
            row_ptr,
            col: keep_col,
            val: keep_val,
        }
    }

    pub fn from_dense(a: &Mat<T>) -> Self {
        let mut trip = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let v = a[(i, j)];
                if v != T::zero() {
                    trip.push((i, j, v));
                }
            }
        }
        Csr::from_triplets(a.nrows(), a.ncols(), trip)
    }

    pub fn to_dense(&self) -> Mat<T> {
        let mut m = Mat::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.col[p])] += self.val[p];
            }
        }
        m
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (self.col[p], self.val[p]))
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[T], y: &mut [T]) {
        for i in 0..self.nrows {
            let mut s = T::zero();
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.val[p] * x[self.col[p]];
            }
            y[i] = s;
        }
    }

    /// Sparse times dense.
    pub fn mul_dense(&self, x: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros(self.nrows, x.ncols());
        for j in 0..x.ncols() {
            for i in 0..self.nrows {
                let mut s = T::zero();
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    s += self.val[p] * x[(self.col[p], j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    /// Dense times sparse.
    pub fn dense_mul(&self, x: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros(x.nrows(), self.ncols);
        for k in 0..self.nrows {
            for p in self.row_ptr[k]..self.row_ptr[k + 1] {
                let (j, v) = (self.col[p], self.val[p]);
                for i in 0..x.nrows() {
                    let t = x[(i, k)] * v;
                    out[(i, j)] += t;
                }
            }
        }
        out
    }

    /// Max absolute row sum (the ∞-norm); equals the 1-norm for Hermitian matrices.
    pub fn inf_norm(&self) -> f64 {
        (0..self.nrows)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// `exp(G)` for a sparse generator: Taylor series applied by sparse-dense
/// products after scaling `‖G/2^s‖ <= 1/2`, then `s` dense squarings.
pub fn expm_sparse<T: Scalar>(g: &Csr<T>) -> Result<Mat<T>> {
    let n = g.nrows;
    let norm = g.inf_norm().max(one_norm_csr(g));
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let factor = 0.5f64.powi(s);
    let scaled = Csr {
        val: g.val.iter().map(|v| v.scale(factor)).collect(),
        ..g.clone()
    };
    let mut out: Mat<T> = Mat::identity(n, n);
    let mut term: Mat<T> = Mat::identity(n, n);
    for k in 1..60 {
        term = scaled.mul_dense(&term);
        let inv = 1.0 / k as f64;
        for j in 0..n {
            for i in 0..n {
                term[(i, j)] = term[(i, j)].scale(inv);
            }
        }
        let tn = frobenius(&term);
        out = lin_comb(&[(1.0, &out), (1.0, &term)], n);
        if tn <= 1e-17 * frobenius(&out) {
            for _ in 0..s {
                out = &out * &out;
            }
            return Ok(out);
        }
    }
    Err(GiqsError::NotConverged {
        iterations: 60,
        residual: frobenius(&term),
    })
}

fn one_norm_csr<T: Scalar>(g: &Csr<T>) -> f64 {
    let mut cols = vec![0.0; g.ncols];
    for i in 0..g.nrows {
        for (j, v) in g.row(i) {
            cols[j] += v.abs();
        }
    }
    cols.into_iter().fold(0.0, f64::max)
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
/// Returns the column chosen for each row.
pub fn assign_min_cost(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if m < n || cost.iter().any(|r| r.len() != m) {
        return Err(GiqsError::invalid(format!(
            "assignment needs rows <= cols, got {n} x {m}"
        )));
    }
    // Shortest augmenting path with potentials, 1-based internally.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            if !delta.is_finite() {
                return Err(GiqsError::invalid("assignment cost matrix is not finite"));
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    Ok(ans)
}

/// Ordinary least squares line `y = slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Root-mean-square residual.
    pub residual: f64,
    pub n: usize,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(GiqsError::Fit(format!("need at least two points, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(GiqsError::Fit("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(LineFit {
        slope,
        intercept,
        r2,
        residual: (ss_res / n as f64).sqrt(),
        n,
    })
}

/// `y ≈ c·x^p` fitted in log-log coordinates; nonpositive samples are dropped.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .unzip();
    fit_line(&lx, &ly)
}
