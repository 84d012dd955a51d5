//! Matrix-level normal form: averaging over the action flow, elimination of
//! nonresonant matrix elements, perturbed eigenvalues and their asymptotics.

use std::sync::Arc;

use faer::Mat;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::error::{GiqsError, Result};
use crate::lattice::norm;
use crate::linalg::{
    adjoint, assign_min_cost, eigh, eigvalsh, expm_sparse, fit_power_law, frobenius,
    hermitian_defect, Csr, LineFit, Scalar,
};
use crate::models::GiqsModel;
use crate::partition::{clusters_from_values, is_resonant_w, PartitionReport, ResonanceParams};

/// Hermitian operator on a finite basis, with the declared order `b` and
/// off-diagonal decay `ν` of its symbol class.
#[derive(Debug, Clone)]
pub struct OperatorMatrix<T: Scalar> {
    pub basis: Arc<Basis>,
    pub entries: Mat<T>,
    pub order: f64,
    pub decay: f64,
}

fn bracket(x: f64) -> f64 {
    (1.0 + x * x).sqrt()
}

impl<T: Scalar> OperatorMatrix<T> {
    pub fn new(basis: Arc<Basis>, entries: Mat<T>, order: f64, decay: f64) -> Result<Self> {
        let n = basis.len();
        if entries.nrows() != n || entries.ncols() != n {
            return Err(GiqsError::invalid(format!(
                "operator is {}x{}, basis has {n} states",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(OperatorMatrix {
            basis,
            entries,
            order,
            decay,
        })
    }

    pub fn zeros(basis: Arc<Basis>) -> Self {
        let n = basis.len();
        OperatorMatrix {
            basis,
            entries: Mat::zeros(n, n),
            order: 0.0,
            decay: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frobenius(&self) -> f64 {
        frobenius(&self.entries)
    }

    pub fn hermitian_defect(&self) -> f64 {
        hermitian_defect(&self.entries)
    }

    fn with_entries(&self, entries: Mat<T>) -> Self {
        OperatorMatrix {
            basis: self.basis.clone(),
            entries,
            order: self.order,
            decay: self.decay,
        }
    }

    /// Smallest `c` with `|V(a,b)| <= c (⟨a⟩+⟨b⟩)^b ⟨a-b⟩^{-ν}` on every entry.
    pub fn decay_constant(&self) -> f64 {
        let b = &self.basis;
        let mut c: f64 = 0.0;
        for j in 0..self.len() {
            let pb = b.point_of(j);
            for i in 0..self.len() {
                let v = self.entries[(i, j)].abs();
                if v == 0.0 {
                    continue;
                }
                let pa = b.point_of(i);
                let diff: Vec<f64> = pa.coords.iter().zip(&pb.coords).map(|(x, y)| x - y).collect();
                let env = (bracket(pa.norm) + bracket(pb.norm)).powf(self.order)
                    * bracket(norm(&diff)).powf(-self.decay);
                c = c.max(v / env);
            }
        }
        c
    }

    /// Convolution operator `V(a,b) = v(a-b)` on a multiplicity-one basis.
    /// Missing coefficients are zero; `v(-k)` must be `conj v(k)`.
    pub fn convolution(basis: Arc<Basis>, coeffs: &[(Vec<i64>, T)], order: f64, decay: f64) -> Result<Self> {
        if !basis.is_multiplicity_one() {
            return Err(GiqsError::invalid("convolution operators need a multiplicity-one basis"));
        }
        for (k, v) in coeffs {
            let neg: Vec<i64> = k.iter().map(|x| -x).collect();
            let partner = coeffs.iter().find(|(q, _)| *q == neg).map(|(_, w)| *w);
            if partner.map(|w| (w - v.conj()).abs() > 1e-14 * (1.0 + v.abs())) != Some(false) {
                return Err(GiqsError::invalid(format!(
                    "convolution coefficient for {k:?} lacks a conjugate partner"
                )));
            }
        }
        let n = basis.len();
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            let a = &basis.points[i].index;
            for (k, v) in coeffs {
                let b: Vec<i64> = a.iter().zip(k).map(|(x, y)| x - y).collect();
                if let Some(j) = basis.find(&b) {
                    m[(i, j)] = *v;
                }
            }
        }
        OperatorMatrix::new(basis, m, order, decay)
    }

    /// Seeded random Hermitian matrix with envelope `amp (⟨a⟩+⟨b⟩)^b ⟨a-b⟩^{-ν}`.
    pub fn random_decay(basis: Arc<Basis>, order: f64, decay: f64, amplitude: f64, seed: u64) -> Self {
        let n = basis.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m: Mat<T> = Mat::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let (pa, pb) = (basis.point_of(i), basis.point_of(j));
                let diff: Vec<f64> = pa.coords.iter().zip(&pb.coords).map(|(x, y)| x - y).collect();
                let env = amplitude
                    * (bracket(pa.norm) + bracket(pb.norm)).powf(order)
                    * bracket(norm(&diff)).powf(-decay);
                let re = 2.0 * rng.random::<f64>() - 1.0;
                let im = 2.0 * rng.random::<f64>() - 1.0;
                let z = if i == j {
                    T::from_re(re * env)
                } else {
                    T::from_c64(Complex64::new(re, im) * env / std::f64::consts::SQRT_2)
                        .unwrap_or(T::from_re(re * env))
                };
                m[(i, j)] = z;
                m[(j, i)] = z.conj();
            }
        }
        OperatorMatrix {
            basis,
            entries: m,
            order,
            decay,
        }
    }
}

const ACTION_TOL: f64 = 1e-9;

fn same_action(x: &[f64], y: &[f64]) -> bool {
    x.iter().zip(y).all(|(a, b)| (a - b).abs() <= ACTION_TOL)
}

/// Zeroes every entry between states with distinct joint actions.
pub fn commutant_projection<T: Scalar>(v: &OperatorMatrix<T>, actions: &[Vec<f64>]) -> OperatorMatrix<T> {
    let n = v.len();
    let m = Mat::from_fn(n, n, |i, j| {
        if same_action(&actions[i], &actions[j]) {
            v.entries[(i, j)]
        } else {
            T::zero()
        }
    });
    v.with_entries(m)
}

/// `(2π)^{-d} ∫ e^{-iφ·A} V e^{iφ·A} dφ` on the uniform grid with `grid_n` nodes per axis.
/// The grid is a tensor product, so each entry picks up the product over
/// axes of the one-dimensional node sums of `e^{-iφ(a_i-b_i)}`.
pub fn average_quadrature<T: Scalar>(
    v: &OperatorMatrix<T>,
    actions: &[Vec<f64>],
    grid_n: usize,
) -> Result<OperatorMatrix<T>> {
    let n = v.len();
    if actions.len() != n {
        return Err(GiqsError::invalid("one action vector per basis state is required"));
    }
    let d = actions.first().map_or(0, |a| a.len());
    let mut spread = 0.0f64;
    for axis in 0..d {
        let (lo, hi) = actions
            .iter()
            .map(|a| a[axis])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
        spread = spread.max(hi - lo);
    }
    let needed = 2 * spread.round() as usize + 1;
    if grid_n < needed {
        return Err(GiqsError::invalid(format!(
            "averaging grid of {grid_n} nodes is below the required {needed}"
        )));
    }
    let nodes: Vec<f64> = (0..grid_n)
        .map(|m| std::f64::consts::TAU * m as f64 / grid_n as f64)
        .collect();
    let node_sum = |delta: f64| -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for &phi in &nodes {
            s += Complex64::from_polar(1.0, -phi * delta);
        }
        s / grid_n as f64
    };
    let mut m = Mat::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let x = v.entries[(i, j)];
            if x == T::zero() {
                continue;
            }
            let mut f = Complex64::new(1.0, 0.0);
            for axis in 0..d {
                let delta = actions[i][axis] - actions[j][axis];
                if delta.abs() > ACTION_TOL {
                    f *= node_sum(delta);
                }
            }
            let z = x.to_c64() * f;
            m[(i, j)] = T::from_c64(z).unwrap_or(T::from_re(z.re));
        }
    }
    let avg = v.with_entries(m);
    let proj = commutant_projection(v, actions);
    let diff = Mat::from_fn(n, n, |i, j| avg.entries[(i, j)] - proj.entries[(i, j)]);
    let err = frobenius(&diff);
    if err > 1e-10 * v.frobenius().max(1.0) {
        return Err(GiqsError::Aliasing(err));
    }
    Ok(avg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalFormOptions {
    /// Eliminated entries need `|ω_a - ω_b|` above this.
    pub divisor_floor: f64,
    /// Keep the accumulated conjugation `e^{G}` in the result.
    pub keep_conjugation: bool,
    /// Recompute `e^{G}(H+V)e^{-G}` directly and compare with `H + Z + R`.
    pub audit_closure: bool,
}

impl Default for NormalFormOptions {
    fn default() -> Self {
        NormalFormOptions {
            divisor_floor: 1e-10,
            keep_conjugation: false,
            audit_closure: true,
        }
    }
}

/// Result of one or more elimination steps. Convention: the generator `G` is
/// anti-Hermitian, `ψ = e^{G} φ`, and `e^{G}(H + V)e^{-G} = H + Z + R`.
#[derive(Debug, Clone)]
pub struct NormalFormResult<T: Scalar> {
    pub generator: Mat<T>,
    pub z: Mat<T>,
    pub remainder: Mat<T>,
    /// Frobenius norm of the nonresonant part before the first step, then after each step.
    pub off_block_mass: Vec<f64>,
    pub divisor_floor: f64,
    pub min_divisor: f64,
    /// Entries reclassified into `Z` because their divisor was below the floor.
    pub audit_warnings: usize,
    /// `‖e^{G}(H+V)e^{-G} - (H+Z+R)‖_F / ‖V‖_F`, when audited.
    pub closure: Option<f64>,
    pub conjugation: Option<Mat<T>>,
    /// Diagonal of `Z` after each step.
    pub z_diagonals: Vec<Vec<f64>>,
}

/// Per-state resonance data used to classify entries.
struct ResonanceTable {
    w: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl ResonanceTable {
    fn new(model: &GiqsModel, basis: &Basis, p: &ResonanceParams) -> Result<Self> {
        let w = basis
            .points
            .iter()
            .map(|a| {
                if a.norm >= p.r {
                    model.gradient(&a.coords)
                } else {
                    Ok(vec![0.0; a.dim()])
                }
            })
            .collect::<Result<_>>()?;
        Ok(ResonanceTable {
            w,
            norms: basis.points.iter().map(|a| a.norm).collect(),
        })
    }

    /// Whether the entry between points `pa` and `pb` survives in the normal form.
    fn keeps(&self, basis: &Basis, pa: usize, pb: usize, p: &ResonanceParams) -> bool {
        if pa == pb {
            return true;
        }
        let (a, b) = (&basis.points[pa].index, &basis.points[pb].index);
        let k: Vec<i64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
        is_resonant_w(&self.w[pa], self.norms[pa], &k, p) || is_resonant_w(&self.w[pb], self.norms[pb], &k, p)
    }
}

struct Split<T: Scalar> {
    z: Csr<T>,
    nonres: Csr<T>,
    gen: Csr<T>,
    warnings: usize,
    min_divisor: f64,
}

fn split<T: Scalar>(
    omega: &[f64],
    v: &Csr<T>,
    basis: &Basis,
    table: &ResonanceTable,
    p: &ResonanceParams,
    floor: f64,
) -> Split<T> {
    let mut z = Vec::new();
    let mut nr = Vec::new();
    let mut g = Vec::new();
    let mut warnings = 0;
    let mut min_divisor = f64::INFINITY;
    for i in 0..v.nrows {
        let pa = basis.states[i].point;
        for (j, x) in v.row(i) {
            let pb = basis.states[j].point;
            if table.keeps(basis, pa, pb, p) {
                z.push((i, j, x));
                continue;
            }
            let div = omega[i] - omega[j];
            if div.abs() < floor {
                warnings += 1;
                z.push((i, j, x));
                continue;
            }
            min_divisor = min_divisor.min(div.abs());
            nr.push((i, j, x));
            g.push((i, j, x.scale(1.0 / div)));
        }
    }
    let n = v.nrows;
    Split {
        z: Csr::from_triplets(n, n, z),
        nonres: Csr::from_triplets(n, n, nr),
        gen: Csr::from_triplets(n, n, g),
        warnings,
        min_divisor,
    }
}

fn dense_add<T: Scalar>(a: &Mat<T>, b: &Mat<T>, cb: f64) -> Mat<T> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] + b[(i, j)].scale(cb))
}

/// Nonresonant part of a dense matrix, as the Frobenius norm of the entries that would be eliminated.
fn nonresonant_mass<T: Scalar>(m: &Mat<T>, basis: &Basis, table: &ResonanceTable, p: &ResonanceParams) -> f64 {
    let n = m.nrows();
    let mut s = 0.0;
    for j in 0..n {
        let pb = basis.states[j].point;
        for i in 0..n {
            let x = m[(i, j)];
            if x == T::zero() {
                continue;
            }
            if !table.keeps(basis, basis.states[i].point, pb, p) {
                s += x.norm_sqr();
            }
        }
    }
    s.sqrt()
}

/// One step on `H = diag(ω)` and a general Hermitian `V`.
fn step<T: Scalar>(
    omega: &[f64],
    v: &Csr<T>,
    basis: &Basis,
    table: &ResonanceTable,
    p: &ResonanceParams,
    opts: &NormalFormOptions,
) -> Result<(Split<T>, Mat<T>, Mat<T>, Option<f64>)> {
    let n = v.nrows;
    let sp = split(omega, v, basis, table, p, opts.divisor_floor);
    let u = expm_sparse(&sp.gen)?;
    let ut = adjoint(&u);
    // e^{G} V e^{-G} - V
    let vu = v.mul_dense(&ut);
    let conj_v = &u * &vu;
    let v_dense = v.to_dense();
    let mut rem = dense_add(&conj_v, &v_dense, -1.0);
    // e^{G} H e^{-G} - H - V_nr' where [G, H] = -V_nr: the tail sum_{n>=2} ad_G^{n-1}(V_nr)/n! enters with a minus sign
    let mut x = sp.nonres.to_dense();
    let scale_v = frobenius(&v_dense).max(f64::MIN_POSITIVE);
    let mut fact = 1.0;
    for k in 2..80 {
        let gx = sp.gen.mul_dense(&x);
        let xg = sp.gen.dense_mul(&x);
        x = dense_add(&gx, &xg, -1.0);
        fact *= k as f64;
        let term_norm = frobenius(&x) / fact;
        rem = dense_add(&rem, &x, -1.0 / fact);
        if term_norm < 1e-18 * scale_v {
            break;
        }
        if k == 79 {
            return Err(GiqsError::NotConverged {
                iterations: k,
                residual: term_norm,
            });
        }
    }
    let closure = if opts.audit_closure {
        let h_plus_v = {
            let mut trip: Vec<(usize, usize, T)> = (0..n).map(|i| (i, i, T::from_re(omega[i]))).collect();
            for i in 0..n {
                trip.extend(v.row(i).map(|(j, x)| (i, j, x)));
            }
            Csr::from_triplets(n, n, trip)
        };
        let direct = &u * &h_plus_v.mul_dense(&ut);
        let z = sp.z.to_dense();
        let mut diff = Mat::from_fn(n, n, |i, j| direct[(i, j)] - z[(i, j)] - rem[(i, j)]);
        for i in 0..n {
            diff[(i, i)] -= T::from_re(omega[i]);
        }
        Some(frobenius(&diff) / scale_v)
    } else {
        None
    };
    Ok((sp, u, rem, closure))
}

fn check_inputs<T: Scalar>(omega: &[f64], v: &OperatorMatrix<T>) -> Result<()> {
    if omega.len() != v.len() {
        return Err(GiqsError::invalid("one frequency per basis state is required"));
    }
    let defect = v.hermitian_defect();
    if defect > 1e-12 {
        return Err(GiqsError::invalid(format!("V is not Hermitian (defect {defect:e})")));
    }
    Ok(())
}

/// Splits `V = Z + V_nr`, solves `[G, H] = -V_nr` entrywise and returns `Z`,
/// `G` and the remainder `R = e^{G}(H+V)e^{-G} - (H+Z)`.
pub fn homological_step<T: Scalar>(
    omega: &[f64],
    v: &OperatorMatrix<T>,
    model: &GiqsModel,
    p: &ResonanceParams,
    opts: &NormalFormOptions,
) -> Result<NormalFormResult<T>> {
    iterate_normal_form(omega, v, model, p, 1, opts)
}

/// Repeats the elimination `steps` times, each time on `Z + R` of the previous step.
pub fn iterate_normal_form<T: Scalar>(
    omega: &[f64],
    v: &OperatorMatrix<T>,
    model: &GiqsModel,
    p: &ResonanceParams,
    steps: usize,
    opts: &NormalFormOptions,
) -> Result<NormalFormResult<T>> {
    if steps == 0 {
        return Err(GiqsError::invalid("at least one normal-form step is required"));
    }
    check_inputs(omega, v)?;
    let basis = &v.basis;
    let table = ResonanceTable::new(model, basis, p)?;
    let mut current = Csr::from_dense(&v.entries);
    let mut masses = vec![nonresonant_mass(&v.entries, basis, &table, p)];
    let mut total_u: Option<Mat<T>> = None;
    let mut warnings = 0;
    let mut min_div = f64::INFINITY;
    let mut z_diagonals = Vec::new();
    let mut last: Option<(Mat<T>, Mat<T>, Mat<T>, Option<f64>)> = None;
    for s in 0..steps {
        let (sp, u, rem, closure) = step(omega, &current, basis, &table, p, opts)?;
        warnings += sp.warnings;
        min_div = min_div.min(sp.min_divisor);
        let after = nonresonant_mass(&rem, basis, &table, p);
        let before = *masses.last().expect("nonempty");
        masses.push(after);
        if after > before && before > 0.0 {
            return Err(GiqsError::Divergence {
                step: s + 1,
                before,
                after,
            });
        }
        let z = sp.z.to_dense();
        z_diagonals.push((0..z.nrows()).map(|i| z[(i, i)].re()).collect());
        total_u = Some(match total_u {
            None => u,
            Some(prev) => &u * &prev,
        });
        if s + 1 < steps {
            current = Csr::from_dense(&dense_add(&z, &rem, 1.0));
        }
        last = Some((sp.gen.to_dense(), z, rem, closure));
    }
    let (generator, z, remainder, closure) = last.expect("steps >= 1");
    Ok(NormalFormResult {
        generator,
        z,
        remainder,
        off_block_mass: masses,
        divisor_floor: opts.divisor_floor,
        min_divisor: min_div,
        audit_warnings: warnings,
        closure,
        conjugation: if opts.keep_conjugation { total_u } else { None },
        z_diagonals,
    })
}

/// Nonzero entries of `Z` joining states of different partition blocks
/// (states outside the partition count as violations).
pub fn support_violations<T: Scalar>(z: &Mat<T>, basis: &Basis, partition: &PartitionReport) -> usize {
    let blocks: Vec<Option<usize>> = basis
        .points
        .iter()
        .map(|a| partition.block_of_index(&a.index))
        .collect();
    let mut bad = 0;
    for j in 0..z.ncols() {
        let bj = blocks[basis.states[j].point];
        for i in 0..z.nrows() {
            if z[(i, j)] != T::zero() {
                let bi = blocks[basis.states[i].point];
                if bi.is_none() || bi != bj {
                    bad += 1;
                }
            }
        }
    }
    bad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenMatch {
    pub a: Vec<i64>,
    pub j: usize,
    pub norm: f64,
    /// Unperturbed eigenvalue `h_L(a)`.
    pub lambda_a: f64,
    /// Eigenvalue of `Π_a ⟨V⟩ Π_a`.
    pub mu: f64,
    pub lambda: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub matches: Vec<EigenMatch>,
    /// Clusters skipped because they hold more predictions than eigenvalues.
    pub skipped_clusters: Vec<usize>,
    /// Weight of the eigenvector-overlap tie-break in the assignment cost.
    pub overlap_weight: f64,
}

/// Eigenvalues of `Π_a ⟨V⟩ Π_a` for every point, in ascending order.
pub fn first_order_corrections<T: Scalar>(v: &OperatorMatrix<T>) -> Result<Vec<Vec<f64>>> {
    let b = &v.basis;
    (0..b.points.len())
        .map(|p| {
            let r = b.states_of(p);
            let m = r.len();
            let blk = Mat::from_fn(m, m, |i, j| v.entries[(r.start + i, r.start + j)]);
            if m == 1 {
                Ok(vec![blk[(0, 0)].re()])
            } else {
                eigvalsh(&blk)
            }
        })
        .collect()
}

/// Dense eigensolve of `diag(ω) + V`, then per-cluster optimal matching of
/// `λ_a + μ_{a,j}` to the perturbed eigenvalues.
pub fn perturbed_spectrum<T: Scalar>(
    model: &GiqsModel,
    omega: &[f64],
    v: &OperatorMatrix<T>,
) -> Result<SpectrumReport> {
    check_inputs(omega, v)?;
    let n = v.len();
    let b = v.basis.clone();
    let mu = first_order_corrections(v)?;
    let mut h = v.entries.clone();
    for i in 0..n {
        h[(i, i)] += T::from_re(omega[i]);
    }
    let (vals, vecs) = eigh(&h)?;

    let mut distinct: Vec<f64> = omega.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    let e_max = *distinct.last().unwrap_or(&0.0);
    let clusters = clusters_from_values(distinct, model.dim() as f64 / model.degree(), e_max);
    let nc = clusters.len();
    // predictions: (point, slot j), grouped by the cluster of the unperturbed value
    let mut pred_by_cluster: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nc];
    for (p, a) in b.points.iter().enumerate() {
        let c = clusters
            .locate(omega[b.first_state[p]])
            .ok_or_else(|| GiqsError::invalid(format!("ω of {:?} not in any cluster", a.index)))?;
        for j in 0..b.multiplicity[p] {
            pred_by_cluster[c].push((p, j));
        }
    }
    // eigenvalues go to the cluster whose predicted range is nearest
    let ranges: Vec<(f64, f64)> = pred_by_cluster
        .iter()
        .map(|ps| {
            ps.iter()
                .map(|&(p, j)| omega[b.first_state[p]] + mu[p][j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)))
        })
        .collect();
    let nearest = |x: f64| -> usize {
        let dist = |c: usize| {
            let (lo, hi) = ranges[c];
            if x < lo {
                lo - x
            } else if x > hi {
                x - hi
            } else {
                0.0
            }
        };
        (0..nc)
            .min_by(|&p, &q| dist(p).total_cmp(&dist(q)))
            .expect("at least one cluster")
    };
    let mut eig_by_cluster: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for (e, &x) in vals.iter().enumerate() {
        eig_by_cluster[nearest(x)].push(e);
    }
    let tau = 1e-8;
    let mut matches = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    for c in 0..nc {
        let preds = &pred_by_cluster[c];
        let eigs = &eig_by_cluster[c];
        if preds.is_empty() {
            continue;
        }
        if preds.len() > eigs.len() {
            skipped.push(c + 1);
            continue;
        }
        let cost: Vec<Vec<f64>> = preds
            .iter()
            .map(|&(p, j)| {
                let pred = omega[b.first_state[p]] + mu[p][j];
                eigs.iter()
                    .map(|&e| {
                        let overlap: f64 = b.states_of(p).map(|s| vecs[(s, e)].norm_sqr()).sum();
                        (vals[e] - pred).abs() + tau * (1.0 - overlap)
                    })
                    .collect()
            })
            .collect();
        let assign = assign_min_cost(&cost)?;
        for (&(p, j), &col) in preds.iter().zip(&assign) {
            let lambda_a = omega[b.first_state[p]];
            let lambda = vals[eigs[col]];
            matches.push(EigenMatch {
                a: b.points[p].index.clone(),
                j,
                norm: b.points[p].norm,
                lambda_a,
                mu: mu[p][j],
                lambda,
                residual: (lambda - lambda_a - mu[p][j]).abs(),
            });
        }
    }
    matches.sort_by(|x, y| x.a.cmp(&y.a).then(x.j.cmp(&y.j)));
    Ok(SpectrumReport {
        matches,
        skipped_clusters: skipped,
        overlap_weight: tau,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaDensityFit {
    pub radii: Vec<f64>,
    pub counts: Vec<usize>,
    pub omega_counts: Vec<usize>,
    pub deficiency: Vec<f64>,
    /// `deficiency ≈ c R^{-ρ}`; absent when Ω is empty or the fit is impossible.
    pub rho: Option<f64>,
    pub fit_r2: Option<f64>,
    pub omega_empty: bool,
}

pub fn omega_density(partition: &PartitionReport, radii: &[f64]) -> Result<OmegaDensityFit> {
    if let Some(&r) = radii.iter().find(|&&r| r > partition.r_max * (1.0 + 1e-12)) {
        return Err(GiqsError::invalid(format!(
            "radius {r} exceeds the partition range {}",
            partition.r_max
        )));
    }
    let in_omega: Vec<bool> = partition
        .block_of
        .iter()
        .map(|&b| partition.blocks[b].module.rank == 0)
        .collect();
    let mut counts = Vec::new();
    let mut omega_counts = Vec::new();
    let mut deficiency = Vec::new();
    for &r in radii {
        let mut tot = 0;
        let mut om = 0;
        for (a, &o) in partition.points.iter().zip(&in_omega) {
            if a.norm <= r * (1.0 + 1e-12) {
                tot += 1;
                om += usize::from(o);
            }
        }
        counts.push(tot);
        omega_counts.push(om);
        deficiency.push(if tot == 0 { 1.0 } else { 1.0 - om as f64 / tot as f64 });
    }
    let omega_empty = !in_omega.iter().any(|&x| x);
    let fit = if omega_empty {
        None
    } else {
        fit_power_law(radii, &deficiency).ok()
    };
    Ok(OmegaDensityFit {
        radii: radii.to_vec(),
        counts,
        omega_counts,
        deficiency,
        rho: fit.map(|f| -f.slope),
        fit_r2: fit.map(|f| f.r2),
        omega_empty,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShellAggregate {
    Mean,
    Max,
    /// Root mean square.
    Rms,
}

/// Groups samples into shells `[lo + k·width, lo + (k+1)·width)` of `|a|`,
/// aggregates each shell and fits `y ≈ c ⟨a⟩^m` through the shell values.
pub fn shell_power_fit(
    norms: &[f64],
    values: &[f64],
    lo: f64,
    hi: f64,
    width: f64,
    agg: ShellAggregate,
) -> Result<(LineFit, Vec<(f64, f64)>)> {
    let nshell = ((hi - lo) / width).ceil().max(1.0) as usize;
    let mut acc = vec![(0.0f64, 0.0f64, 0usize, 0.0f64); nshell];
    for (&r, &y) in norms.iter().zip(values) {
        if r < lo || r >= hi || !y.is_finite() {
            continue;
        }
        let k = (((r - lo) / width) as usize).min(nshell - 1);
        let e = &mut acc[k];
        e.0 += bracket(r);
        e.2 += 1;
        match agg {
            ShellAggregate::Mean => e.1 += y,
            ShellAggregate::Max => e.3 = e.3.max(y),
            ShellAggregate::Rms => e.1 += y * y,
        }
    }
    let shells: Vec<(f64, f64)> = acc
        .into_iter()
        .filter(|e| e.2 > 0)
        .map(|(sx, sy, c, mx)| {
            let x = sx / c as f64;
            let y = match agg {
                ShellAggregate::Mean => sy / c as f64,
                ShellAggregate::Max => mx,
                ShellAggregate::Rms => (sy / c as f64).sqrt(),
            };
            (x, y)
        })
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = shells.iter().copied().unzip();
    Ok((fit_power_law(&x, &y)?, shells))
}

/// Row norms of a matrix, one per state.
pub fn row_norms<T: Scalar>(m: &Mat<T>) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].norm_sqr()).sum::<f64>().sqrt())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticFit {
    pub points: Vec<Vec<i64>>,
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    /// Fitted orders of `|z_0|`, `|z_1|` and the leftover `|λ - h_L - z_0 - z_1|`.
    pub m0: f64,
    pub m1: f64,
    pub m_rest: f64,
    pub orders_decrease: bool,
}

/// Fits the decay orders of the first two expansion coefficients on Ω and
/// of what they leave unexplained, using shell maxima over `[lo, hi)`.
pub fn asymptotic_expansion_fit<T: Scalar>(
    nf: &NormalFormResult<T>,
    basis: &Basis,
    spectrum: &SpectrumReport,
    partition: &PartitionReport,
    lo: f64,
    hi: f64,
    width: f64,
) -> Result<AsymptoticFit> {
    if !basis.is_multiplicity_one() {
        return Err(GiqsError::invalid("the expansion fit needs a multiplicity-one basis"));
    }
    let z0_all = nf
        .z_diagonals
        .first()
        .ok_or_else(|| GiqsError::Fit("no normal-form step recorded".into()))?;
    // z_1: diagonal of the next step's Z, i.e. of the averaged remainder
    let z1_all: Vec<f64> = (0..basis.len()).map(|i| nf.remainder[(i, i)].re()).collect();
    let z1_all = if nf.z_diagonals.len() >= 2 {
        nf.z_diagonals[1].iter().zip(z0_all).map(|(a, b)| a - b).collect()
    } else {
        z1_all
    };
    let mut pts = Vec::new();
    let (mut z0, mut z1, mut rest, mut norms) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for m in &spectrum.matches {
        if partition.in_omega(&m.a) != Some(true) {
            continue;
        }
        let Some(p) = basis.find(&m.a) else { continue };
        let s = basis.first_state[p];
        pts.push(m.a.clone());
        norms.push(m.norm);
        z0.push(z0_all[s]);
        z1.push(z1_all[s]);
        rest.push((m.lambda - m.lambda_a - z0_all[s] - z1_all[s]).abs());
    }
    if pts.len() < 3 {
        return Err(GiqsError::Fit(format!("only {} Ω points in the fit window", pts.len())));
    }
    let abs = |v: &[f64]| v.iter().map(|x| x.abs()).collect::<Vec<_>>();
    let f0 = shell_power_fit(&norms, &abs(&z0), lo, hi, width, ShellAggregate::Max)?.0;
    let f1 = shell_power_fit(&norms, &abs(&z1), lo, hi, width, ShellAggregate::Max)?.0;
    let fr = shell_power_fit(&norms, &rest, lo, hi, width, ShellAggregate::Max)?.0;
    Ok(AsymptoticFit {
        points: pts,
        z0,
        z1,
        m0: f0.slope,
        m1: f1.slope,
        m_rest: fr.slope,
        orders_decrease: f1.slope < f0.slope && fr.slope < f1.slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::ActionPoint;

    fn line_basis(model: &GiqsModel, n: i64) -> Arc<Basis> {
        let pts = (0..n).map(|i| ActionPoint::new(vec![i], model.kappa())).collect();
        Arc::new(Basis::from_points(model, pts))
    }

    #[test]
    fn two_level_generator() {
        let m = GiqsModel::flat_torus(1);
        let b = line_basis(&m, 2);
        let v = Mat::from_fn(2, 2, |i, j| if i != j { 0.1 } else { 0.0 });
        let op = OperatorMatrix::new(b, v, 0.0, 4.0).unwrap();
        // ω = (1, 2) as in the textbook two-level example
        let nf = homological_step(&[1.0, 2.0], &op, &m, &ResonanceParams::defaults_for(&m), &Default::default())
            .unwrap();
        assert!((nf.generator[(0, 1)] + 0.1).abs() < 1e-15);
        assert!((nf.generator[(1, 0)] - 0.1).abs() < 1e-15);
        assert_eq!(nf.z[(0, 1)], 0.0);
        assert!(nf.closure.unwrap() < 1e-12);
    }

    #[test]
    fn averaging_keeps_diagonal_and_kills_offdiagonal() {
        let m = GiqsModel::flat_torus(2);
        let pts = vec![
            ActionPoint::new(vec![0, 0], &[0.0, 0.0]),
            ActionPoint::new(vec![1, 0], &[0.0, 0.0]),
        ];
        let b = Arc::new(Basis::from_points(&m, pts));
        let v = Mat::from_fn(2, 2, |i, j| if i == j { 1.0 + i as f64 } else { 0.3 });
        let op = OperatorMatrix::new(b.clone(), v, 0.0, 0.0).unwrap();
        let avg = average_quadrature(&op, &b.actions(), 5).unwrap();
        assert!(avg.entries[(0, 1)].abs() < 1e-15);
        assert_eq!(avg.entries[(1, 1)], 2.0);
    }

    #[test]
    fn grid_below_the_action_spread_is_rejected() {
        let m = GiqsModel::flat_torus(1);
        let b = line_basis(&m, 6);
        let op = OperatorMatrix::<f64>::random_decay(b.clone(), 0.0, 1.0, 1.0, 2);
        let err = average_quadrature(&op, &b.actions(), 5).unwrap_err();
        assert!(matches!(err, GiqsError::InvalidArgument(_)));
    }

    #[test]
    fn sphere_multiplet_survives_averaging() {
        let m = GiqsModel::sphere(2).unwrap();
        let b = Arc::new(Basis::annulus(&m, 0.0, 2.0).unwrap());
        let op = OperatorMatrix::<Complex64>::random_decay(b.clone(), 0.0, 2.0, 1.0, 5);
        let avg = average_quadrature(&op, &b.actions(), 9).unwrap();
        // states 1..4 form the a = 3/2 multiplet
        for i in 1..4 {
            for j in 1..4 {
                assert!((avg.entries[(i, j)] - op.entries[(i, j)]).norm() < 1e-15);
            }
        }
        assert!(avg.entries[(0, 1)].norm() < 1e-15);
    }

    #[test]
    fn zero_and_scalar_perturbations_have_zero_residuals() {
        let m = GiqsModel::flat_torus(2);
        let b = Arc::new(Basis::annulus(&m, 0.0, 4.0).unwrap());
        let omega = b.omegas(&m).unwrap();
        let n = b.len();
        for c in [0.0, 0.7] {
            let v = Mat::from_fn(n, n, |i, j| if i == j { c } else { 0.0 });
            let op = OperatorMatrix::new(b.clone(), v, 0.0, 4.0).unwrap();
            let rep = perturbed_spectrum(&m, &omega, &op).unwrap();
            assert_eq!(rep.matches.len(), n);
            assert!(rep.matches.iter().all(|x| x.residual < 1e-12));
        }
    }
}
