//! Quantum resonances, the block partition of the joint spectrum, spectral
//! clusters and the Melnikov small-divisor scan.

use std::collections::{BTreeMap, HashMap};

use num_traits::Signed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GiqsError, Result};
use crate::lattice::{enumerate_lattice_with_budget, norm, ActionPoint, Budget};
use crate::models::{GiqsModel, Rational};

/// `(δ, μ, R)` of the resonance relation `|w(a)·k| < |a|^δ |k|`, `|k| <= |a|^μ`, `|a| >= R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceParams {
    pub delta: f64,
    pub mu: f64,
    pub r: f64,
}

impl ResonanceParams {
    pub fn defaults_for(model: &GiqsModel) -> Self {
        ResonanceParams {
            delta: (model.degree() - 1.0) / 2.0,
            mu: 0.25,
            r: 8.0,
        }
    }

    pub fn validate(&self, model: &GiqsModel) -> Result<()> {
        let dm1 = model.degree() - 1.0;
        if !(self.delta > 0.0 && self.delta < dm1) {
            return Err(GiqsError::invalid(format!(
                "delta = {} must satisfy 0 < delta < d - 1 = {dm1}",
                self.delta
            )));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(GiqsError::invalid(format!("mu = {} must be positive", self.mu)));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(GiqsError::invalid(format!("R = {} must be positive", self.r)));
        }
        Ok(())
    }

    /// Largest admissible `|k|` at radius `|a|`.
    pub fn k_radius(&self, a_norm: f64) -> f64 {
        a_norm.powf(self.mu) * (1.0 + 1e-12)
    }
}

/// The resonance test on a precomputed gradient.
pub fn is_resonant_w(w: &[f64], a_norm: f64, k: &[i64], p: &ResonanceParams) -> bool {
    let kf: Vec<f64> = k.iter().map(|&x| x as f64).collect();
    let kn = norm(&kf);
    if kn == 0.0 || a_norm < p.r || kn > p.k_radius(a_norm) {
        return false;
    }
    let dot: f64 = w.iter().zip(&kf).map(|(a, b)| a * b).sum();
    dot.abs() < a_norm.powf(p.delta) * kn
}

pub fn is_resonant(model: &GiqsModel, a: &ActionPoint, k: &[i64], p: &ResonanceParams) -> Result<bool> {
    if k.len() != a.dim() {
        return Err(GiqsError::invalid("k has the wrong dimension"));
    }
    if k.iter().all(|&x| x == 0) {
        return Err(GiqsError::invalid("k must be nonzero"));
    }
    if a.norm < p.r {
        return Ok(false);
    }
    let w = model.gradient(&a.coords)?;
    Ok(is_resonant_w(&w, a.norm, k, p))
}

/// Nonzero integer vectors with `|k| <= radius`, one representative per `±k`
/// (first nonzero entry positive), ordered by norm then lexicographically.
pub fn half_ball(d: usize, radius: f64) -> Vec<Vec<i64>> {
    let m = radius.floor() as i64;
    let mut out = Vec::new();
    let mut k = vec![-m; d];
    if d == 0 {
        return out;
    }
    loop {
        let sq: i64 = k.iter().map(|x| x * x).sum();
        let first = k.iter().find(|&&x| x != 0).copied().unwrap_or(0);
        if first > 0 && (sq as f64) <= radius * radius * (1.0 + 1e-12) {
            out.push(k.clone());
        }
        let mut ax = d;
        loop {
            if ax == 0 {
                out.sort_by(|a, b| {
                    let na: i64 = a.iter().map(|x| x * x).sum();
                    let nb: i64 = b.iter().map(|x| x * x).sum();
                    na.cmp(&nb).then_with(|| a.cmp(b))
                });
                return out;
            }
            ax -= 1;
            if k[ax] < m {
                k[ax] += 1;
                break;
            }
            k[ax] = -m;
        }
    }
}

/// A saturated sublattice of `Z^d`, stored by its row Hermite normal form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResonanceModule {
    pub rank: usize,
    pub basis: Vec<Vec<i64>>,
    pub saturated: bool,
}

impl ResonanceModule {
    pub fn zero() -> Self {
        ResonanceModule {
            rank: 0,
            basis: Vec::new(),
            saturated: true,
        }
    }

    /// `span_R(gens) ∩ Z^d` in canonical form.
    pub fn saturate(d: usize, gens: &[Vec<i64>]) -> Self {
        let rows: Vec<Vec<i128>> = gens
            .iter()
            .filter(|g| g.iter().any(|&x| x != 0))
            .map(|g| g.iter().map(|&x| x as i128).collect())
            .collect();
        if rows.is_empty() {
            return ResonanceModule::zero();
        }
        let perp = integer_kernel(&rows, d);
        let sat = integer_kernel(&perp, d);
        let basis = hnf_rows(sat, d);
        ResonanceModule {
            rank: basis.len(),
            basis: basis
                .into_iter()
                .map(|r| r.into_iter().map(|x| x as i64).collect())
                .collect(),
            saturated: true,
        }
    }

    /// Whether `k` lies in the row lattice.
    pub fn contains(&self, k: &[i64]) -> bool {
        let mut v: Vec<i128> = k.iter().map(|&x| x as i128).collect();
        for row in &self.basis {
            let Some(p) = row.iter().position(|&x| x != 0) else {
                continue;
            };
            let piv = row[p] as i128;
            if v[p] % piv != 0 {
                return false;
            }
            let q = v[p] / piv;
            for (vi, &ri) in v.iter_mut().zip(row) {
                *vi -= q * ri as i128;
            }
        }
        v.iter().all(|&x| x == 0)
    }
}

/// Basis (as rows) of `{x ∈ Z^d : A x = 0}` by unimodular column reduction.
fn integer_kernel(a: &[Vec<i128>], d: usize) -> Vec<Vec<i128>> {
    let mut m: Vec<Vec<i128>> = a.to_vec();
    let mut u: Vec<Vec<i128>> = (0..d)
        .map(|i| (0..d).map(|j| i128::from(i == j)).collect())
        .collect();
    // columns are stored as index j of each row; apply ops to m (rows of A) and u (rows of I)
    let col_op = |mat: &mut Vec<Vec<i128>>, dst: usize, src: usize, q: i128| {
        for row in mat.iter_mut() {
            row[dst] -= q * row[src];
        }
    };
    let col_swap = |mat: &mut Vec<Vec<i128>>, x: usize, y: usize| {
        for row in mat.iter_mut() {
            row.swap(x, y);
        }
    };
    let mut piv = 0;
    for r in 0..m.len() {
        if piv == d {
            break;
        }
        for c in piv + 1..d {
            while m[r][c] != 0 {
                let q = m[r][piv] / m[r][c];
                col_op(&mut m, piv, c, q);
                col_op(&mut u, piv, c, q);
                col_swap(&mut m, piv, c);
                col_swap(&mut u, piv, c);
            }
        }
        if m[r][piv] != 0 {
            piv += 1;
        }
    }
    (piv..d).map(|c| (0..d).map(|i| u[i][c]).collect()).collect()
}

/// Row Hermite normal form: positive pivots, entries above pivots reduced to `[0, pivot)`.
fn hnf_rows(mut b: Vec<Vec<i128>>, d: usize) -> Vec<Vec<i128>> {
    let n = b.len();
    let mut r = 0;
    for col in 0..d {
        if r == n {
            break;
        }
        for i in r + 1..n {
            while b[i][col] != 0 {
                let q = b[r][col] / b[i][col];
                for c in 0..d {
                    let t = b[i][c];
                    b[r][c] -= q * t;
                }
                b.swap(r, i);
            }
        }
        if b[r][col] == 0 {
            continue;
        }
        if b[r][col] < 0 {
            for x in b[r].iter_mut() {
                *x = -*x;
            }
        }
        let p = b[r][col];
        for i in 0..r {
            let q = b[i][col].div_euclid(p);
            for c in 0..d {
                let t = b[r][c];
                b[i][c] -= q * t;
            }
        }
        r += 1;
    }
    b.truncate(r);
    b
}

/// All resonant `k` (one per sign) of a point with known gradient.
fn resonant_vectors(w: &[f64], a_norm: f64, ks: &[Vec<i64>], p: &ResonanceParams) -> Vec<Vec<i64>> {
    if a_norm < p.r {
        return Vec::new();
    }
    let kr = p.k_radius(a_norm);
    ks.iter()
        .take_while(|k| norm_i(k) <= kr)
        .filter(|k| is_resonant_w(w, a_norm, k, p))
        .cloned()
        .collect()
}

fn norm_i(k: &[i64]) -> f64 {
    (k.iter().map(|x| (x * x) as f64).sum::<f64>()).sqrt()
}

/// Saturation of every `k` with `is_resonant(a, k)`; rank 0 when there is none.
pub fn resonance_module(model: &GiqsModel, a: &ActionPoint, p: &ResonanceParams) -> Result<ResonanceModule> {
    if a.norm < p.r {
        return Err(GiqsError::invalid(format!(
            "|a| = {} is below the resonance radius R = {}",
            a.norm, p.r
        )));
    }
    let kr = p.k_radius(a.norm);
    let count = (2.0 * kr + 1.0).powi(a.dim() as i32);
    Budget::from_env().check("resonance enumeration", count * 8.0 * a.dim() as f64)?;
    let w = model.gradient(&a.coords)?;
    let ks = half_ball(a.dim(), kr);
    Ok(ResonanceModule::saturate(a.dim(), &resonant_vectors(&w, a.norm, &ks, p)))
}

/// Checks applied to a finished partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionChecks {
    /// A block with `max|a| / min|a|` above this is a dyadicity violation.
    pub dyadic_limit: f64,
    /// Cross-block pairs with separation ratio below this are violations.
    pub separation_floor: f64,
    /// Cap on the number of violations stored per kind (counts are always exact).
    pub max_listed: usize,
}

impl Default for PartitionChecks {
    fn default() -> Self {
        PartitionChecks {
            dyadic_limit: 2.0,
            separation_floor: 0.25,
            max_listed: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionBlock {
    pub id: usize,
    pub module: ResonanceModule,
    /// Enumerates blocks sharing the same module.
    pub j: usize,
    pub members: Vec<Vec<i64>>,
    pub min_norm: f64,
    pub max_norm: f64,
    /// Touches the annulus boundary through a resonant edge.
    pub boundary: bool,
}

impl PartitionBlock {
    pub fn dyadic_ratio(&self) -> f64 {
        self.max_norm / self.min_norm.max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicViolation {
    pub block: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceViolation {
    pub block: usize,
    pub point: Vec<i64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationViolation {
    pub a: Vec<i64>,
    pub b: Vec<i64>,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Violations {
    pub dyadic: Vec<DyadicViolation>,
    pub dyadic_count: usize,
    pub resonance: Vec<ResonanceViolation>,
    pub resonance_count: usize,
    pub separation: Vec<SeparationViolation>,
    pub separation_count: usize,
}

impl Violations {
    pub fn total(&self) -> usize {
        self.dyadic_count + self.resonance_count + self.separation_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub params: ResonanceParams,
    pub checks: PartitionChecks,
    pub r_min: f64,
    pub r_max: f64,
    pub n_points: usize,
    pub blocks: Vec<PartitionBlock>,
    pub boundary_blocks: usize,
    /// Max over non-boundary blocks of `max|a| / min|a|`.
    pub dyadic_constant: f64,
    /// Min over cross-block pairs (non-boundary) of `(|a-b| + |ω_a-ω_b|) / (|a|^μ + |b|^μ)`.
    pub separation_constant: f64,
    pub separation_pair: Option<(Vec<i64>, Vec<i64>)>,
    /// Members of resonant blocks that are not resonant themselves (they join
    /// through a partner `a - k` resonant with `k`).
    pub unresonant_members: usize,
    pub violations: Violations,
    #[serde(skip)]
    pub points: Vec<ActionPoint>,
    #[serde(skip)]
    pub block_of: Vec<usize>,
}

impl PartitionReport {
    /// Block id of a lattice index, if it lies in the annulus.
    pub fn block_of_index(&self, index: &[i64]) -> Option<usize> {
        self.points
            .binary_search_by(|p| p.index.as_slice().cmp(index))
            .ok()
            .map(|i| self.block_of[i])
    }

    /// Whether the point belongs to a rank-0 block (the Ω set).
    pub fn in_omega(&self, index: &[i64]) -> Option<bool> {
        self.block_of_index(index)
            .map(|b| self.blocks[b].module.rank == 0)
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

struct PointData {
    omega: f64,
    resonant: Vec<Vec<i64>>,
}

pub fn build_partition(
    model: &GiqsModel,
    r_min: f64,
    r_max: f64,
    p: &ResonanceParams,
    checks: &PartitionChecks,
) -> Result<PartitionReport> {
    build_partition_with_budget(model, r_min, r_max, p, checks, Budget::from_env())
}

pub fn build_partition_with_budget(
    model: &GiqsModel,
    r_min: f64,
    r_max: f64,
    p: &ResonanceParams,
    checks: &PartitionChecks,
    budget: Budget,
) -> Result<PartitionReport> {
    p.validate(model)?;
    let d = model.dim();
    let kappa = model.kappa().to_vec();
    let points: Vec<ActionPoint> = enumerate_lattice_with_budget(model, r_min, r_max, budget)?
        .into_iter()
        .filter(|a| a.norm >= model.eval_radius())
        .collect();
    if points.is_empty() {
        return Err(GiqsError::EmptyDomain(format!("no lattice points in [{r_min}, {r_max}]")));
    }
    let ks = half_ball(d, p.k_radius(r_max));
    let data: Vec<PointData> = points
        .par_iter()
        .map(|a| -> Result<PointData> {
            let omega = model.omega(a)?;
            let resonant = if a.norm >= p.r {
                let w = model.gradient(&a.coords)?;
                resonant_vectors(&w, a.norm, &ks, p)
            } else {
                Vec::new()
            };
            Ok(PointData { omega, resonant })
        })
        .collect::<Result<_>>()?;

    let lookup: HashMap<&[i64], usize> = points
        .iter()
        .enumerate()
        .map(|(i, a)| (a.index.as_slice(), i))
        .collect();
    let lies_in_spectrum = |idx: &[i64]| {
        let q = ActionPoint::new(idx.to_vec(), &kappa);
        model.cone().contains(&q.coords) && model.in_spectrum(idx) && q.norm >= model.eval_radius()
    };

    let n = points.len();
    let mut uf = UnionFind::new(n);
    let mut escapes = vec![false; n];
    for (i, a) in points.iter().enumerate() {
        for k in &data[i].resonant {
            for sign in [1i64, -1] {
                let b: Vec<i64> = a.index.iter().zip(k).map(|(x, y)| x + sign * y).collect();
                match lookup.get(b.as_slice()) {
                    Some(&j) => uf.union(i, j),
                    None => {
                        if lies_in_spectrum(&b) {
                            escapes[i] = true;
                        }
                    }
                }
            }
        }
    }

    // components in order of their first (lexicographically smallest) member
    let mut comp_of_root: HashMap<usize, usize> = HashMap::new();
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let r = uf.find(i);
        let c = *comp_of_root.entry(r).or_insert_with(|| {
            comps.push(Vec::new());
            comps.len() - 1
        });
        comps[c].push(i);
    }

    let mut block_of = vec![0usize; n];
    let mut blocks = Vec::with_capacity(comps.len());
    let mut j_counter: BTreeMap<ResonanceModule, usize> = BTreeMap::new();
    for (id, members) in comps.iter().enumerate() {
        let gens: Vec<Vec<i64>> = members
            .iter()
            .flat_map(|&i| data[i].resonant.iter().cloned())
            .collect();
        let module = ResonanceModule::saturate(d, &gens);
        let j = {
            let c = j_counter.entry(module.clone()).or_insert(0);
            *c += 1;
            *c
        };
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for &i in members {
            block_of[i] = id;
            lo = lo.min(points[i].norm);
            hi = hi.max(points[i].norm);
        }
        blocks.push(PartitionBlock {
            id,
            module,
            j,
            members: members.iter().map(|&i| points[i].index.clone()).collect(),
            min_norm: lo,
            max_norm: hi,
            boundary: members.iter().any(|&i| escapes[i]),
        });
    }

    let mut violations = Violations::default();
    let cap = checks.max_listed;

    // (i) dyadicity
    let mut dyadic_constant: f64 = 1.0;
    for b in blocks.iter().filter(|b| !b.boundary) {
        let ratio = b.dyadic_ratio();
        dyadic_constant = dyadic_constant.max(ratio);
        if ratio > checks.dyadic_limit {
            violations.dyadic_count += 1;
            if violations.dyadic.len() < cap {
                violations.dyadic.push(DyadicViolation { block: b.id, ratio });
            }
        }
    }

    // (ii) resonance structure
    let mut unresonant_members = 0usize;
    let push_res = |v: &mut Violations, block: usize, point: &[i64], reason: String| {
        v.resonance_count += 1;
        if v.resonance.len() < cap {
            v.resonance.push(ResonanceViolation {
                block,
                point: point.to_vec(),
                reason,
            });
        }
    };
    for (i, a) in points.iter().enumerate() {
        let b = &blocks[block_of[i]];
        if b.boundary {
            continue;
        }
        let res = &data[i].resonant;
        if b.module.rank == 0 {
            if !res.is_empty() || b.members.len() != 1 {
                push_res(&mut violations, b.id, &a.index, "rank-0 block member is resonant".into());
            }
            continue;
        }
        for k in res {
            if !b.module.contains(k) {
                push_res(
                    &mut violations,
                    b.id,
                    &a.index,
                    format!("resonant vector {k:?} outside the block module"),
                );
            }
            for sign in [1i64, -1] {
                let c: Vec<i64> = a.index.iter().zip(k).map(|(x, y)| x + sign * y).collect();
                if let Some(&jc) = lookup.get(c.as_slice()) {
                    if block_of[jc] != b.id {
                        push_res(&mut violations, b.id, &a.index, format!("a{sign:+}k leaves the block"));
                    }
                }
            }
        }
        if res.is_empty() {
            unresonant_members += 1;
            // matrix-element form: some partner a - k inside the block is resonant with k ∈ M
            let joined = b.members.iter().any(|m| {
                let k: Vec<i64> = a.index.iter().zip(m).map(|(x, y)| x - y).collect();
                let jm = lookup[m.as_slice()];
                data[jm].resonant.iter().any(|r| r == &k || r.iter().zip(&k).all(|(x, y)| *x == -*y))
            });
            if !joined {
                push_res(
                    &mut violations,
                    b.id,
                    &a.index,
                    "member has no resonant partner in its block".into(),
                );
            }
        }
    }

    // (iii) separation
    let (separation_constant, separation_pair) =
        separation_scan(model, &points, &data, &blocks, &block_of, p, checks, &mut violations);

    let boundary_blocks = blocks.iter().filter(|b| b.boundary).count();
    Ok(PartitionReport {
        params: *p,
        checks: *checks,
        r_min,
        r_max,
        n_points: n,
        blocks,
        boundary_blocks,
        dyadic_constant,
        separation_constant,
        separation_pair,
        unresonant_members,
        violations,
        points,
        block_of,
    })
}

#[allow(clippy::too_many_arguments)]
fn separation_scan(
    _model: &GiqsModel,
    points: &[ActionPoint],
    data: &[PointData],
    blocks: &[PartitionBlock],
    block_of: &[usize],
    p: &ResonanceParams,
    checks: &PartitionChecks,
    violations: &mut Violations,
) -> (f64, Option<(Vec<i64>, Vec<i64>)>) {
    let eligible: Vec<usize> = (0..points.len())
        .filter(|&i| !blocks[block_of[i]].boundary)
        .collect();
    let mut order = eligible.clone();
    order.sort_by(|&x, &y| points[x].norm.total_cmp(&points[y].norm).then(x.cmp(&y)));
    let pw: Vec<f64> = points.iter().map(|a| a.norm.powf(p.mu)).collect();
    let ratio = |i: usize, j: usize| {
        let dist = norm(
            &points[i]
                .coords
                .iter()
                .zip(&points[j].coords)
                .map(|(x, y)| x - y)
                .collect::<Vec<_>>(),
        );
        (dist + (data[i].omega - data[j].omega).abs()) / (pw[i] + pw[j])
    };
    let mut best = f64::INFINITY;
    let mut best_pair = None;
    // seed the bound with lattice neighbours
    for w in order.windows(2) {
        let (i, j) = (w[0], w[1]);
        if block_of[i] != block_of[j] {
            let r = ratio(i, j);
            if r < best {
                best = r;
                best_pair = Some((i, j));
            }
        }
    }
    let floor = checks.separation_floor;
    let mut listed: Vec<(f64, usize, usize)> = Vec::new();
    for (oi, &i) in order.iter().enumerate() {
        for &j in &order[oi + 1..] {
            let radial = (points[j].norm - points[i].norm) / (pw[i] + pw[j]);
            if radial >= best.max(floor) {
                break;
            }
            if block_of[i] == block_of[j] {
                continue;
            }
            let r = ratio(i, j);
            if r < best {
                best = r;
                best_pair = Some((i, j));
            }
            if r < floor {
                violations.separation_count += 1;
                listed.push((r, i, j));
            }
        }
    }
    listed.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    listed.truncate(checks.max_listed);
    violations.separation = listed
        .into_iter()
        .map(|(r, i, j)| SeparationViolation {
            a: points[i].index.clone(),
            b: points[j].index.clone(),
            ratio: r,
        })
        .collect();
    let pair = best_pair.map(|(i, j)| {
        let (a, b) = (points[i].index.clone(), points[j].index.clone());
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    });
    (best, pair)
}

/// Intervals `[α_n, β_n]` covering the eigenvalues `h_L(Λ) ∩ [0, E_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralClusters {
    pub e_max: f64,
    /// Exponent `d / 𝚍` of the gap bound `2 n^{-d/𝚍}`.
    pub gap_exponent: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub n_values: usize,
    pub max_width: f64,
    /// Clusters `n` (numbered from 1) whose following gap misses the bound.
    pub gap_failures: Vec<usize>,
    pub width_failures: Vec<usize>,
    pub coverage_ok: bool,
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl SpectralClusters {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Cluster index (0-based) containing `x`.
    pub fn locate(&self, x: f64) -> Option<usize> {
        let i = self.alpha.partition_point(|&a| a <= x);
        if i == 0 {
            return None;
        }
        (x <= self.beta[i - 1]).then_some(i - 1)
    }

    /// `2 n^{-d/𝚍}` for the gap after cluster `n` (1-based).
    pub fn gap_bound(&self, n: usize) -> f64 {
        2.0 * (n as f64).powf(-self.gap_exponent)
    }

    pub fn verified(&self) -> bool {
        self.gap_failures.is_empty() && self.width_failures.is_empty() && self.coverage_ok
    }
}

/// Sorted distinct eigenvalues `<= e_max` (exact deduplication on rational models).
pub fn spectrum_values(model: &GiqsModel, e_max: f64) -> Result<Vec<f64>> {
    let r = model.radius_for_energy(e_max);
    let pts = enumerate_lattice_with_budget(model, 0.0, r.max(1e-9), Budget::from_env())?;
    let pts: Vec<ActionPoint> = pts.into_iter().filter(|a| a.norm >= model.eval_radius()).collect();
    let exact: Option<Vec<Rational>> = pts.iter().map(|a| model.omega_exact(a)).collect();
    let mut vals: Vec<f64> = match exact {
        Some(mut ex) => {
            ex.sort();
            ex.dedup();
            ex.into_iter()
                .map(|q| *q.numer() as f64 / *q.denom() as f64)
                .collect()
        }
        None => {
            let mut v = pts
                .par_iter()
                .map(|a| model.omega(a))
                .collect::<Result<Vec<f64>>>()?;
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
            v
        }
    };
    vals.retain(|&v| v <= e_max * (1.0 + 1e-12));
    Ok(vals)
}

pub fn build_clusters(model: &GiqsModel, e_max: f64) -> Result<SpectralClusters> {
    let vals = spectrum_values(model, e_max)?;
    Ok(clusters_from_values(vals, model.dim() as f64 / model.degree(), e_max))
}

/// Greedy clustering of sorted distinct values: close the running interval
/// whenever the gap reaches the bound, otherwise extend it while the width
/// stays at most 2; report clusters where neither is possible.
pub fn clusters_from_values(vals: Vec<f64>, gap_exponent: f64, e_max: f64) -> SpectralClusters {
    let mut c = SpectralClusters {
        e_max,
        gap_exponent,
        alpha: Vec::new(),
        beta: Vec::new(),
        n_values: vals.len(),
        max_width: 0.0,
        gap_failures: Vec::new(),
        width_failures: Vec::new(),
        coverage_ok: true,
        values: Vec::new(),
    };
    let Some(&first) = vals.first() else {
        return c;
    };
    let (mut a, mut b) = (first, first);
    for &v in &vals[1..] {
        let n = c.alpha.len() + 1;
        if v - b >= c.gap_bound(n) {
            c.alpha.push(a);
            c.beta.push(b);
            a = v;
        } else if v - a > 2.0 {
            // neither merge nor split is admissible
            c.gap_failures.push(n);
            c.alpha.push(a);
            c.beta.push(b);
            a = v;
        }
        b = v;
    }
    c.alpha.push(a);
    c.beta.push(b);
    for (i, (a, b)) in c.alpha.iter().zip(&c.beta).enumerate() {
        let w = b - a;
        c.max_width = c.max_width.max(w);
        if w > 2.0 {
            c.width_failures.push(i + 1);
        }
    }
    c.coverage_ok = vals.iter().all(|&v| c.locate(v).is_some())
        && c.alpha.windows(2).all(|w| w[0] < w[1])
        && c.beta.iter().zip(c.alpha.iter().skip(1)).all(|(b, a)| b < a);
    c.values = vals;
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleClass {
    Dangerous,
    Nondangerous,
}

/// Positional classification: `r` even and `ω_l`, `ω_{l+r/2}` share a cluster for
/// every `l <= r/2`. Frequencies outside every cluster never share one.
pub fn classify_tuple(clusters: &SpectralClusters, omegas: &[f64]) -> TupleClass {
    let r = omegas.len();
    if r == 0 || r % 2 == 1 {
        return TupleClass::Nondangerous;
    }
    let h = r / 2;
    let paired = (0..h).all(|l| match (clusters.locate(omegas[l]), clusters.locate(omegas[l + h])) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    });
    if paired {
        TupleClass::Dangerous
    } else {
        TupleClass::Nondangerous
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelnikovViolation {
    /// Indices of the tuple in canonical order: `j` plus-side entries, then the rest.
    pub tuple: Vec<Vec<i64>>,
    pub j: usize,
    pub divisor: f64,
    pub threshold: f64,
    pub class: TupleClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelnikovReport {
    pub r: usize,
    pub cutoff: f64,
    pub gamma: f64,
    pub tau: f64,
    pub n_points: usize,
    pub tuples_scanned: u64,
    pub exact: bool,
    pub violations: Vec<MelnikovViolation>,
    pub violation_count: u64,
    /// Smallest non-exempt divisor.
    pub min_divisor: f64,
    /// Smallest nonzero non-exempt `divisor · max(1, max|a|)^τ`.
    pub min_scaled_max: f64,
    /// Same with the third largest norm in place of the largest.
    pub min_scaled_max3: f64,
}

/// Default tuple budget for the Melnikov scan.
pub const MAX_TUPLES: u64 = 400_000_000;

fn multichoose(n: u64, k: u64) -> f64 {
    // C(n + k - 1, k)
    let mut c = 1.0f64;
    for i in 0..k {
        c *= (n + i) as f64 / (i + 1) as f64;
    }
    c
}

fn multisets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Scans `|Σ_{l<=j} ω - Σ_{l>j} ω|` over multisets from `Λ ∩ B_cutoff`, for `j = 1..=r`.
pub fn melnikov_scan(
    model: &GiqsModel,
    clusters: &SpectralClusters,
    r: usize,
    cutoff: f64,
    gamma: f64,
    tau: f64,
    max_listed: usize,
) -> Result<MelnikovReport> {
    if r < 2 {
        return Err(GiqsError::invalid("Melnikov order r must be at least 2"));
    }
    if !(gamma > 0.0 && tau >= 0.0) {
        return Err(GiqsError::invalid("gamma must be positive and tau nonnegative"));
    }
    let mut pts: Vec<ActionPoint> = enumerate_lattice_with_budget(model, 0.0, cutoff, Budget::from_env())?
        .into_iter()
        .filter(|a| a.norm >= model.eval_radius())
        .collect();
    let omegas: Vec<f64> = pts.iter().map(|a| model.omega(a)).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&x, &y| omegas[x].total_cmp(&omegas[y]).then(pts[x].index.cmp(&pts[y].index)));
    pts = order.iter().map(|&i| pts[i].clone()).collect();
    let omegas: Vec<f64> = order.iter().map(|&i| omegas[i]).collect();
    let exact: Option<Vec<Rational>> = pts.iter().map(|a| model.omega_exact(a)).collect();
    let n = pts.len();

    let total: f64 = (1..=r)
        .map(|j| multichoose(n as u64, j as u64) * multichoose(n as u64, (r - j) as u64))
        .sum();
    if total > MAX_TUPLES as f64 {
        return Err(GiqsError::Budget {
            what: "Melnikov tuple scan",
            needed_mb: total * (r * 8) as f64 / (1024.0 * 1024.0),
            budget_mb: Budget::from_env().mb,
        });
    }
    let norms: Vec<f64> = pts.iter().map(|a| a.norm.max(1.0)).collect();

    struct Partial {
        scanned: u64,
        viol: Vec<MelnikovViolation>,
        count: u64,
        min_div: f64,
        min_max: f64,
        min_max3: f64,
    }

    let mut report = MelnikovReport {
        r,
        cutoff,
        gamma,
        tau,
        n_points: n,
        tuples_scanned: 0,
        exact: exact.is_some(),
        violations: Vec::new(),
        violation_count: 0,
        min_divisor: f64::INFINITY,
        min_scaled_max: f64::INFINITY,
        min_scaled_max3: f64::INFINITY,
    };
    for j in 1..=r {
        let lefts = multisets(n, j);
        let rights = multisets(n, r - j);
        let parts: Vec<Partial> = lefts
            .par_iter()
            .map(|left| {
                let mut p = Partial {
                    scanned: 0,
                    viol: Vec::new(),
                    count: 0,
                    min_div: f64::INFINITY,
                    min_max: f64::INFINITY,
                    min_max3: f64::INFINITY,
                };
                let lsum_f: f64 = left.iter().map(|&i| omegas[i]).sum();
                let lsum_q: Option<Rational> = exact.as_ref().map(|ex| left.iter().map(|&i| ex[i]).sum());
                for right in &rights {
                    p.scanned += 1;
                    let divisor = match (&exact, lsum_q) {
                        (Some(ex), Some(lq)) => {
                            let rq: Rational = right.iter().map(|&i| ex[i]).sum();
                            let q = (lq - rq).abs();
                            *q.numer() as f64 / *q.denom() as f64
                        }
                        _ => (lsum_f - right.iter().map(|&i| omegas[i]).sum::<f64>()).abs(),
                    };
                    let mut ns: Vec<f64> = left.iter().chain(right).map(|&i| norms[i]).collect();
                    ns.sort_by(|a, b| b.total_cmp(a));
                    let nmax = ns[0];
                    let threshold = gamma / nmax.powf(tau);
                    let tuple_omegas: Vec<f64> = left.iter().chain(right).map(|&i| omegas[i]).collect();
                    let class = classify_tuple(clusters, &tuple_omegas);
                    if class == TupleClass::Dangerous && 2 * j == r {
                        continue;
                    }
                    p.min_div = p.min_div.min(divisor);
                    if divisor > 0.0 {
                        p.min_max = p.min_max.min(divisor * nmax.powf(tau));
                        let n3 = ns[2.min(ns.len() - 1)];
                        p.min_max3 = p.min_max3.min(divisor * n3.powf(tau));
                    }
                    if divisor < threshold {
                        p.count += 1;
                        if p.viol.len() < max_listed {
                            p.viol.push(MelnikovViolation {
                                tuple: left.iter().chain(right).map(|&i| pts[i].index.clone()).collect(),
                                j,
                                divisor,
                                threshold,
                                class,
                            });
                        }
                    }
                }
                p
            })
            .collect();
        for p in parts {
            report.tuples_scanned += p.scanned;
            report.violation_count += p.count;
            report.min_divisor = report.min_divisor.min(p.min_div);
            report.min_scaled_max = report.min_scaled_max.min(p.min_max);
            report.min_scaled_max3 = report.min_scaled_max3.min(p.min_max3);
            for v in p.viol {
                if report.violations.len() < max_listed {
                    report.violations.push(v);
                }
            }
        }
    }
    Ok(report)
}

/// Recomputes a reported divisor from scratch (exactly when the model allows it).
pub fn recompute_divisor(model: &GiqsModel, tuple: &[Vec<i64>], j: usize) -> Result<f64> {
    let pts: Vec<ActionPoint> = tuple
        .iter()
        .map(|idx| ActionPoint::new(idx.clone(), model.kappa()))
        .collect();
    let exact: Option<Vec<Rational>> = pts.iter().map(|a| model.omega_exact(a)).collect();
    if let Some(ex) = exact {
        let l: Rational = ex[..j].iter().sum();
        let r: Rational = ex[j..].iter().sum();
        let q = (l - r).abs();
        return Ok(*q.numer() as f64 / *q.denom() as f64);
    }
    let om: Vec<f64> = pts.iter().map(|a| model.omega(a)).collect::<Result<_>>()?;
    Ok((om[..j].iter().sum::<f64>() - om[j..].iter().sum::<f64>()).abs())
}
