//! Truncated Schrödinger evolution `i ∂_t ψ = (H_L + V(t)) ψ`, Sobolev norms and growth fits.

use std::io::Write;
use std::sync::Arc;

use faer::Mat;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::error::{GiqsError, Result};
use crate::linalg::{expm, fit_line, Csr};
use crate::models::{GiqsModel, ModelKind};
use crate::normalform::OperatorMatrix;

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);

/// A basis of every state with `|a| <= cutoff`, with the outermost 10% of
/// radii marked as the boundary shell.
#[derive(Debug, Clone)]
pub struct TruncatedBasis {
    pub model: GiqsModel,
    pub cutoff: f64,
    pub basis: Arc<Basis>,
    pub boundary: Vec<bool>,
    pub omega: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Fraction of the cutoff radius beyond which states belong to the boundary shell.
pub const SHELL_START: f64 = 0.9;

impl TruncatedBasis {
    pub fn new(model: &GiqsModel, cutoff: f64) -> Result<Self> {
        let basis = Arc::new(Basis::annulus(model, 0.0, cutoff)?);
        let boundary = basis
            .states
            .iter()
            .map(|s| basis.points[s.point].norm > SHELL_START * cutoff)
            .collect();
        let omega = basis.omegas(model)?;
        let per_point: Vec<f64> = basis.points.iter().map(|a| model.k0_weight(a)).collect();
        let weights = basis.states.iter().map(|s| per_point[s.point]).collect();
        Ok(TruncatedBasis {
            model: model.clone(),
            cutoff,
            basis,
            boundary,
            omega,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    /// State position of a lattice index (slot 0).
    pub fn position(&self, index: &[i64]) -> Option<usize> {
        self.basis.find(index).map(|p| self.basis.first_state[p])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub coeffs: Vec<C>,
}

impl StateVector {
    pub fn zeros(n: usize) -> Self {
        StateVector { coeffs: vec![ZERO; n] }
    }

    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// `(Σ_a k0(a)^{2s} Σ_slots |ψ_{a,slot}|²)^{1/2}`.
pub fn sobolev_norm(basis: &TruncatedBasis, psi: &StateVector, s: f64) -> f64 {
    basis
        .weights
        .iter()
        .zip(&psi.coeffs)
        .map(|(w, z)| w.powf(2.0 * s) * z.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Fraction of `|ψ|²` carried by the boundary shell.
pub fn tail_mass(basis: &TruncatedBasis, psi: &StateVector) -> f64 {
    let total: f64 = psi.coeffs.iter().map(|z| z.norm_sqr()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let shell: f64 = basis
        .boundary
        .iter()
        .zip(&psi.coeffs)
        .filter(|(b, _)| **b)
        .map(|(_, z)| z.norm_sqr())
        .sum();
    shell / total
}

/// `f(t) = Σ amp·cos(freq·t)`; a zero frequency gives a constant term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeProfile {
    pub terms: Vec<(f64, f64)>,
}

impl TimeProfile {
    pub fn constant(c: f64) -> Self {
        TimeProfile {
            terms: vec![(0.0, c)],
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.terms.iter().map(|(f, a)| a * (f * t).cos()).sum()
    }

    /// `sup |f|` and `sup |f'|` bounds.
    pub fn bounds(&self) -> (f64, f64) {
        (
            self.terms.iter().map(|(_, a)| a.abs()).sum(),
            self.terms.iter().map(|(f, a)| (a * f).abs()).sum(),
        )
    }
}

/// One spatial Fourier mode `c e^{ik·x} + conj(c) e^{-ik·x}` (just `Re c` for `k = 0`)
/// with a time profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMode {
    pub k: Vec<i64>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
    pub profile: TimeProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationKind {
    /// `Σ_j (D_j + B_j(t))² - D_j² + W(t)` on the torus.
    MagneticTorus {
        /// One mode list per axis.
        field: Vec<Vec<FieldMode>>,
        potential: Vec<FieldMode>,
    },
    /// `W(t)` alone.
    ConvolutionPotential { potential: Vec<FieldMode> },
    /// `f(t) R` with `R` a frozen random Hermitian matrix with the `(b, ν)` envelope.
    RandomDecay { amplitude: f64, profile: TimeProfile },
    /// `V ≡ 0`.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDependentPerturbation {
    #[serde(flatten)]
    pub kind: PerturbationKind,
    pub order: f64,
    pub decay: f64,
    pub seed: u64,
}

impl TimeDependentPerturbation {
    pub fn free() -> Self {
        TimeDependentPerturbation {
            kind: PerturbationKind::Free,
            order: 0.0,
            decay: f64::INFINITY,
            seed: 0,
        }
    }

    /// A smooth quasiperiodic magnetic field and potential on the 2-torus, with
    /// three incommensurate frequencies.
    pub fn quasiperiodic_magnetic(amplitude: f64, seed: u64) -> Self {
        let freqs = [1.0, std::f64::consts::SQRT_2, 0.5 * (1.0 + 5f64.sqrt())];
        let prof = |shift: usize| TimeProfile {
            terms: (0..3).map(|i| (freqs[(i + shift) % 3], amplitude / (i + 1) as f64)).collect(),
        };
        TimeDependentPerturbation {
            kind: PerturbationKind::MagneticTorus {
                field: vec![
                    vec![FieldMode {
                        k: vec![0, 1],
                        re: 0.5,
                        im: 0.0,
                        profile: prof(0),
                    }],
                    vec![FieldMode {
                        k: vec![1, 0],
                        re: 0.0,
                        im: 0.5,
                        profile: prof(1),
                    }],
                ],
                potential: vec![
                    FieldMode {
                        k: vec![1, 1],
                        re: 0.5,
                        im: 0.0,
                        profile: prof(2),
                    },
                    FieldMode {
                        k: vec![1, -1],
                        re: 0.25,
                        im: 0.25,
                        profile: prof(0),
                    },
                ],
            },
            order: 1.0,
            decay: f64::INFINITY,
            seed,
        }
    }
}

/// Truncated convolution (multiplication by a real function) matrix of one mode.
fn mode_matrix(basis: &Basis, mode: &FieldMode) -> Csr<C> {
    let n = basis.len();
    let c = C::new(mode.re, mode.im);
    let zero_k = mode.k.iter().all(|&x| x == 0);
    let mut trip = Vec::new();
    for (i, a) in basis.points.iter().enumerate() {
        if zero_k {
            trip.push((i, i, C::new(mode.re, 0.0)));
            continue;
        }
        // (f ψ)_a = Σ_k f_k ψ_{a-k}
        for (sign, coef) in [(1i64, c), (-1i64, c.conj())] {
            let b: Vec<i64> = a.index.iter().zip(&mode.k).map(|(x, y)| x - sign * y).collect();
            if let Some(j) = basis.find(&b) {
                trip.push((i, j, coef));
            }
        }
    }
    Csr::from_triplets(n, n, trip)
}

fn csr_mul(a: &Csr<C>, b: &Csr<C>) -> Csr<C> {
    let mut trip = Vec::new();
    for i in 0..a.nrows {
        for (k, x) in a.row(i) {
            for (j, y) in b.row(k) {
                trip.push((i, j, x * y));
            }
        }
    }
    Csr::from_triplets(a.nrows, b.ncols, trip)
}

fn csr_diag_scale(d: &[f64], a: &Csr<C>, left: bool) -> Csr<C> {
    let mut out = a.clone();
    for i in 0..a.nrows {
        for p in a.row_ptr[i]..a.row_ptr[i + 1] {
            let s = if left { d[i] } else { d[a.col[p]] };
            out.val[p] *= s;
        }
    }
    out
}

/// Coefficient of a term: product of profile values (empty = 1).
#[derive(Debug, Clone)]
struct Term {
    profiles: Vec<usize>,
    values: Vec<C>,
}

/// `V(t) = Σ_terms (Π profiles(t)) M_term` on a shared sparsity pattern.
#[derive(Debug, Clone)]
pub struct AssembledPerturbation {
    n: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    profiles: Vec<TimeProfile>,
    terms: Vec<Term>,
}

impl AssembledPerturbation {
    fn from_terms(n: usize, profiles: Vec<TimeProfile>, raw: Vec<(Vec<usize>, Csr<C>)>) -> Self {
        // union pattern, with the diagonal always present
        let mut pattern: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (_, m) in &raw {
            for (i, row) in pattern.iter_mut().enumerate() {
                row.extend(m.row(i).map(|(j, _)| j));
            }
        }
        let mut row_ptr = vec![0];
        let mut col = Vec::new();
        for row in pattern.iter_mut() {
            row.sort_unstable();
            row.dedup();
            col.extend_from_slice(row);
            row_ptr.push(col.len());
        }
        let terms = raw
            .into_iter()
            .map(|(profiles, m)| {
                let mut values = vec![ZERO; col.len()];
                for i in 0..n {
                    let cols = &col[row_ptr[i]..row_ptr[i + 1]];
                    for (j, x) in m.row(i) {
                        let p = cols.binary_search(&j).expect("column in pattern");
                        values[row_ptr[i] + p] += x;
                    }
                }
                Term { profiles, values }
            })
            .collect();
        AssembledPerturbation {
            n,
            row_ptr,
            col,
            profiles,
            terms,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Off-diagonal entries exist.
    pub fn is_diagonal(&self) -> bool {
        self.col.len() == self.n
    }

    /// `diag(ω) + V(t)` as a CSR matrix on the shared pattern.
    pub fn hamiltonian(&self, omega: &[f64], t: f64) -> Csr<C> {
        let pv: Vec<f64> = self.profiles.iter().map(|p| p.eval(t)).collect();
        let mut val = vec![ZERO; self.col.len()];
        for term in &self.terms {
            let c: f64 = term.profiles.iter().map(|&i| pv[i]).product();
            if c == 0.0 {
                continue;
            }
            for (v, x) in val.iter_mut().zip(&term.values) {
                *v += x * c;
            }
        }
        for i in 0..self.n {
            // the diagonal is the first entry >= i; it is always in the pattern
            let cols = &self.col[self.row_ptr[i]..self.row_ptr[i + 1]];
            let p = cols.binary_search(&i).expect("diagonal in pattern");
            val[self.row_ptr[i] + p] += omega[i];
        }
        Csr {
            nrows: self.n,
            ncols: self.n,
            row_ptr: self.row_ptr.clone(),
            col: self.col.clone(),
            val,
        }
    }
}

fn mismatch(kind: &str, model: &GiqsModel) -> GiqsError {
    GiqsError::ModelMismatch {
        kind: kind.to_string(),
        model: model.kind_name().to_string(),
    }
}

fn check_mode(mode: &FieldMode, d: usize) -> Result<()> {
    if mode.k.len() != d {
        return Err(GiqsError::invalid(format!("mode {:?} is not a {d}-vector", mode.k)));
    }
    Ok(())
}

/// Precomputes the constant matrices of `V(t)` for fast evaluation.
pub fn prepare_perturbation(basis: &TruncatedBasis, spec: &TimeDependentPerturbation) -> Result<AssembledPerturbation> {
    let b = &basis.basis;
    let n = b.len();
    let d = basis.model.dim();
    let mut profiles = Vec::new();
    let mut raw: Vec<(Vec<usize>, Csr<C>)> = Vec::new();
    let add_potential = |potential: &[FieldMode], profiles: &mut Vec<TimeProfile>, raw: &mut Vec<(Vec<usize>, Csr<C>)>| -> Result<()> {
        for m in potential {
            check_mode(m, d)?;
            profiles.push(m.profile.clone());
            raw.push((vec![profiles.len() - 1], mode_matrix(b, m)));
        }
        Ok(())
    };
    match &spec.kind {
        PerturbationKind::Free => {}
        PerturbationKind::MagneticTorus { field, potential } => {
            if !matches!(basis.model.kind(), ModelKind::Torus(_)) {
                return Err(mismatch("magnetic_torus", &basis.model));
            }
            if field.len() != d {
                return Err(GiqsError::invalid(format!(
                    "magnetic field needs {d} components, got {}",
                    field.len()
                )));
            }
            for (j, comp) in field.iter().enumerate() {
                let dj: Vec<f64> = b.states.iter().map(|s| b.points[s.point].coords[j]).collect();
                let mut mats = Vec::new();
                for m in comp {
                    check_mode(m, d)?;
                    profiles.push(m.profile.clone());
                    let idx = profiles.len() - 1;
                    let bm = mode_matrix(b, m);
                    // D B + B D
                    let left = csr_diag_scale(&dj, &bm, true);
                    let right = csr_diag_scale(&dj, &bm, false);
                    let mut trip = Vec::new();
                    for i in 0..n {
                        trip.extend(left.row(i).map(|(c, x)| (i, c, x)));
                        trip.extend(right.row(i).map(|(c, x)| (i, c, x)));
                    }
                    raw.push((vec![idx], Csr::from_triplets(n, n, trip)));
                    mats.push((idx, bm));
                }
                // B² = Σ_{m,m'} p_m p_m' B_m B_m'
                for (ia, ma) in &mats {
                    for (ib, mb) in &mats {
                        raw.push((vec![*ia, *ib], csr_mul(ma, mb)));
                    }
                }
            }
            add_potential(potential, &mut profiles, &mut raw)?;
        }
        PerturbationKind::ConvolutionPotential { potential } => {
            if !b.is_multiplicity_one() {
                return Err(mismatch("convolution_potential", &basis.model));
            }
            add_potential(potential, &mut profiles, &mut raw)?;
        }
        PerturbationKind::RandomDecay { amplitude, profile } => {
            let r = OperatorMatrix::<C>::random_decay(b.clone(), spec.order, spec.decay, *amplitude, spec.seed);
            profiles.push(profile.clone());
            raw.push((vec![0], Csr::from_dense(&r.entries)));
        }
    }
    Ok(AssembledPerturbation::from_terms(n, profiles, raw))
}

/// `V(t)` as a dense Hermitian operator.
pub fn assemble_perturbation(
    basis: &TruncatedBasis,
    spec: &TimeDependentPerturbation,
    t: f64,
) -> Result<OperatorMatrix<C>> {
    let ap = prepare_perturbation(basis, spec)?;
    let zero = vec![0.0; basis.len()];
    let h = ap.hamiltonian(&zero, t);
    OperatorMatrix::new(basis.basis.clone(), h.to_dense(), spec.order, spec.decay)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub dt: f64,
    pub s_list: Vec<f64>,
    /// Record norms every this many steps (the final time is always recorded).
    pub record_every: usize,
    /// Keep full states every this many records.
    pub checkpoint_every: Option<usize>,
    /// Per-step relative L² drift that triggers step halving.
    pub drift_tol: f64,
    pub max_halvings: usize,
    /// Bases up to this size use dense Padé exponentials.
    pub dense_limit: usize,
    /// Truncation tolerance of the Chebyshev series.
    pub cheb_tol: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            dt: 0.05,
            s_list: vec![1.0, 2.0],
            record_every: 1,
            checkpoint_every: None,
            drift_tol: 1e-10,
            max_halvings: 6,
            dense_limit: 400,
            cheb_tol: 1e-15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub l2: Vec<f64>,
    pub s_list: Vec<f64>,
    /// `sobolev[i][k]`: norm for `s_list[i]` at `times[k]`.
    pub sobolev: Vec<Vec<f64>>,
    pub tail: Vec<f64>,
    pub checkpoints: Vec<(f64, StateVector)>,
    pub steps: usize,
    pub halvings: usize,
    pub method: String,
}

impl Trajectory {
    pub fn max_l2_drift(&self) -> f64 {
        let n0 = self.l2.first().copied().unwrap_or(0.0);
        self.l2.iter().map(|x| (x - n0).abs()).fold(0.0, f64::max) / n0.max(f64::MIN_POSITIVE)
    }

    /// One row per record: `t, l2, s=<s>..., tail`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string(), "l2".to_string()];
        header.extend(self.s_list.iter().map(|s| format!("s={s}")));
        header.push("tail".to_string());
        wr.write_record(&header)?;
        for k in 0..self.times.len() {
            let mut row = vec![format!("{}", self.times[k]), format!("{}", self.l2[k])];
            row.extend(self.sobolev.iter().map(|v| format!("{}", v[k])));
            row.push(format!("{}", self.tail[k]));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `J_0(x) .. J_{kmax}(x)` by Miller's backward recurrence.
pub fn bessel_j_sequence(x: f64, kmax: usize) -> Vec<f64> {
    if x == 0.0 {
        let mut v = vec![0.0; kmax + 1];
        v[0] = 1.0;
        return v;
    }
    let ax = x.abs();
    let start = ((kmax as f64).max(ax) + 20.0 + 2.0 * ax.max(1.0).sqrt() * 5.0) as usize;
    let start = start + start % 2;
    let mut j = vec![0.0; start + 2];
    j[start + 1] = 0.0;
    j[start] = 1e-300;
    for k in (1..=start).rev() {
        j[k - 1] = 2.0 * k as f64 / ax * j[k] - j[k + 1];
        if j[k - 1].abs() > 1e250 {
            for v in j[k - 1..].iter_mut() {
                *v *= 1e-250;
            }
        }
    }
    let mut norm = j[0];
    for k in (2..=start).step_by(2) {
        norm += 2.0 * j[k];
    }
    let mut out: Vec<f64> = j[..=kmax].iter().map(|v| v / norm).collect();
    if x < 0.0 {
        for (k, v) in out.iter_mut().enumerate() {
            if k % 2 == 1 {
                *v = -*v;
            }
        }
    }
    out
}

fn gershgorin(h: &Csr<C>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..h.nrows {
        let mut c = 0.0;
        let mut r = 0.0;
        for (j, x) in h.row(i) {
            if j == i {
                c = x.re;
            } else {
                r += x.norm();
            }
        }
        lo = lo.min(c - r);
        hi = hi.max(c + r);
    }
    (lo, hi)
}

/// `exp(-i τ H) v` by a Chebyshev expansion on the Gershgorin interval.
fn chebyshev_apply(h: &Csr<C>, v: &[C], tau: f64, tol: f64) -> Vec<C> {
    let n = v.len();
    let (lo, hi) = gershgorin(h);
    let center = 0.5 * (lo + hi);
    let half = (0.5 * (hi - lo)).max(1e-12) * (1.0 + 1e-12);
    let x = tau * half;
    let kmax = (x + 10.0 * x.max(1.0).cbrt() + 30.0) as usize;
    let jn = bessel_j_sequence(x, kmax);
    let last = jn.iter().rposition(|j| j.abs() > tol).unwrap_or(0);
    // H̃ = (H - c)/r
    let apply = |src: &[C], dst: &mut [C]| {
        h.matvec(src, dst);
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (*d - s * center) / half;
        }
    };
    let minus_i_pow = [C::new(1.0, 0.0), C::new(0.0, -1.0), C::new(-1.0, 0.0), C::new(0.0, 1.0)];
    let mut acc: Vec<C> = v.iter().map(|z| z * jn[0]).collect();
    if last >= 1 {
        let mut t_prev = v.to_vec();
        let mut t_cur = vec![ZERO; n];
        apply(&t_prev, &mut t_cur);
        let c1 = minus_i_pow[1] * (2.0 * jn[1]);
        for (a, t) in acc.iter_mut().zip(&t_cur) {
            *a += t * c1;
        }
        let mut tmp = vec![ZERO; n];
        for k in 2..=last {
            apply(&t_cur, &mut tmp);
            for ((nx, p), _) in tmp.iter_mut().zip(&t_prev).zip(0..n) {
                *nx = *nx * 2.0 - p;
            }
            let ck = minus_i_pow[k % 4] * (2.0 * jn[k]);
            for (a, t) in acc.iter_mut().zip(&tmp) {
                *a += t * ck;
            }
            std::mem::swap(&mut t_prev, &mut t_cur);
            std::mem::swap(&mut t_cur, &mut tmp);
        }
    }
    let phase = C::from_polar(1.0, -tau * center);
    acc.iter().map(|z| z * phase).collect()
}

fn dense_apply(h: &Csr<C>, v: &[C], tau: f64) -> Result<Vec<C>> {
    let n = v.len();
    let hd = h.to_dense();
    let a = Mat::from_fn(n, n, |i, j| hd[(i, j)] * C::new(0.0, -tau));
    let u = expm(&a)?;
    Ok((0..n).map(|i| (0..n).map(|j| u[(i, j)] * v[j]).sum()).collect())
}

fn l2(v: &[C]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Midpoint-exponential stepping `ψ_{n+1} = exp(-i·dt·H(t_n + dt/2)) ψ_n` from
/// `t0` to `t1` (backwards when `t1 < t0`).
pub fn evolve(
    basis: &TruncatedBasis,
    spec: &TimeDependentPerturbation,
    psi0: &StateVector,
    t0: f64,
    t1: f64,
    opts: &EvolveOptions,
) -> Result<Trajectory> {
    if !(opts.dt > 0.0) {
        return Err(GiqsError::invalid("dt must be positive"));
    }
    if psi0.len() != basis.len() {
        return Err(GiqsError::invalid(format!(
            "initial state has {} entries, basis has {}",
            psi0.len(),
            basis.len()
        )));
    }
    if psi0.coeffs.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(GiqsError::invalid("initial state has non-finite entries"));
    }
    let ap = prepare_perturbation(basis, spec)?;
    let steps = ((t1 - t0).abs() / opts.dt).round().max(1.0) as usize;
    let h = (t1 - t0) / steps as f64;
    let diagonal = ap.is_diagonal();
    let method = if diagonal {
        "diagonal"
    } else if basis.len() <= opts.dense_limit {
        "pade"
    } else {
        "chebyshev"
    };
    let mut traj = Trajectory {
        times: Vec::new(),
        l2: Vec::new(),
        s_list: opts.s_list.clone(),
        sobolev: vec![Vec::new(); opts.s_list.len()],
        tail: Vec::new(),
        checkpoints: Vec::new(),
        steps,
        halvings: 0,
        method: method.to_string(),
    };
    let mut psi = psi0.clone();
    let record = |traj: &mut Trajectory, t: f64, psi: &StateVector| {
        traj.times.push(t);
        traj.l2.push(psi.l2_norm());
        for (i, &s) in opts.s_list.iter().enumerate() {
            traj.sobolev[i].push(sobolev_norm(basis, psi, s));
        }
        traj.tail.push(tail_mass(basis, psi));
        if let Some(every) = opts.checkpoint_every {
            if (traj.times.len() - 1) % every.max(1) == 0 {
                traj.checkpoints.push((t, psi.clone()));
            }
        }
    };
    record(&mut traj, t0, &psi);
    let propagate = |v: &[C], t_start: f64, tau: f64| -> Result<Vec<C>> {
        let hm = ap.hamiltonian(&basis.omega, t_start + 0.5 * tau);
        if diagonal {
            return Ok(v
                .iter()
                .enumerate()
                .map(|(i, z)| {
                    let d = hm.row(i).find(|(j, _)| *j == i).map_or(0.0, |(_, x)| x.re);
                    z * C::from_polar(1.0, -tau * d)
                })
                .collect());
        }
        if basis.len() <= opts.dense_limit {
            dense_apply(&hm, v, tau)
        } else {
            Ok(chebyshev_apply(&hm, v, tau, opts.cheb_tol))
        }
    };
    for n in 0..steps {
        let t_n = t0 + n as f64 * h;
        let before = l2(&psi.coeffs);
        let mut halvings = 0;
        let next = loop {
            let sub = 1usize << halvings;
            let tau = h / sub as f64;
            let mut v = psi.coeffs.clone();
            for m in 0..sub {
                v = propagate(&v, t_n + m as f64 * tau, tau)?;
            }
            let drift = (l2(&v) - before).abs() / before.max(f64::MIN_POSITIVE);
            if drift <= opts.drift_tol {
                break v;
            }
            if halvings == opts.max_halvings {
                return Err(GiqsError::StepRejected { drift, halvings });
            }
            halvings += 1;
        };
        traj.halvings += halvings;
        psi.coeffs = next;
        if (n + 1) % opts.record_every.max(1) == 0 || n + 1 == steps {
            record(&mut traj, t0 + (n + 1) as f64 * h, &psi);
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub s: f64,
    pub epsilon: f64,
    pub intercept: f64,
    pub window: (f64, f64),
    pub residual: f64,
    pub r2: f64,
    pub max_tail: f64,
    pub n: usize,
}

/// Truncation validity threshold on the boundary-shell mass fraction.
pub const TAIL_THRESHOLD: f64 = 1e-6;

/// Slope of `log ‖ψ(t)‖_s` against `log ⟨t⟩` over the window.
pub fn growth_exponent(traj: &Trajectory, s: f64, window: (f64, f64)) -> Result<GrowthFit> {
    growth_exponent_with_threshold(traj, s, window, TAIL_THRESHOLD)
}

pub fn growth_exponent_with_threshold(
    traj: &Trajectory,
    s: f64,
    window: (f64, f64),
    threshold: f64,
) -> Result<GrowthFit> {
    let si = traj
        .s_list
        .iter()
        .position(|&x| (x - s).abs() < 1e-12)
        .ok_or_else(|| GiqsError::invalid(format!("s = {s} was not recorded")))?;
    let (lo, hi) = window;
    let (t_first, t_last) = (
        traj.times.iter().copied().fold(f64::INFINITY, f64::min),
        traj.times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    if !(lo < hi) || lo < t_first - 1e-9 || hi > t_last + 1e-9 {
        return Err(GiqsError::invalid(format!(
            "window [{lo}, {hi}] is not inside the trajectory [{t_first}, {t_last}]"
        )));
    }
    let idx: Vec<usize> = (0..traj.times.len())
        .filter(|&k| traj.times[k] >= lo - 1e-9 && traj.times[k] <= hi + 1e-9)
        .collect();
    let max_tail = idx.iter().map(|&k| traj.tail[k]).fold(0.0, f64::max);
    if max_tail > threshold {
        return Err(GiqsError::TruncationContaminated { max_tail, threshold });
    }
    let x: Vec<f64> = idx.iter().map(|&k| (1.0 + traj.times[k].powi(2)).sqrt().ln()).collect();
    let y: Vec<f64> = idx.iter().map(|&k| traj.sobolev[si][k].ln()).collect();
    let fit = fit_line(&x, &y)?;
    Ok(GrowthFit {
        s,
        epsilon: fit.slope,
        intercept: fit.intercept,
        window,
        residual: fit.residual,
        r2: fit.r2,
        max_tail,
        n: fit.n,
    })
}

/// Normalized random state on the points with `|a| <= radius`, seeded.
pub fn localized_state(basis: &TruncatedBasis, radius: f64, seed: u64) -> StateVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psi = StateVector::zeros(basis.len());
    for (i, s) in basis.basis.states.iter().enumerate() {
        if basis.basis.points[s.point].norm <= radius {
            psi.coeffs[i] = C::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        }
    }
    let n = psi.l2_norm();
    if n > 0.0 {
        for z in psi.coeffs.iter_mut() {
            *z /= n;
        }
    }
    psi
}
