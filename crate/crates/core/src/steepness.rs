//! Sampling estimates of steepness indices and the isolated-critical-point test on affine lines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GiqsError, Result};
use crate::lattice::norm;
use crate::linalg::fit_power_law;
use crate::models::GiqsModel;

/// `{a ∈ C : r_min <= |a| <= r_max}`, additionally clipped to the model's evaluation radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annulus {
    pub r_min: f64,
    pub r_max: f64,
}

impl Annulus {
    pub fn new(r_min: f64, r_max: f64) -> Result<Self> {
        if !(r_min >= 0.0 && r_min < r_max && r_max.is_finite()) {
            return Err(GiqsError::invalid(format!("bad annulus [{r_min}, {r_max}]")));
        }
        Ok(Annulus { r_min, r_max })
    }

    /// The default sampling domain `B_1 \ B_{1/2}`, pushed outward when the
    /// model is only evaluated beyond radius 1.
    pub fn default_for(model: &GiqsModel) -> Self {
        let r0 = model.eval_radius();
        if r0 > 0.0 {
            Annulus {
                r_min: r0,
                r_max: 2.0 * r0,
            }
        } else {
            Annulus {
                r_min: 0.5,
                r_max: 1.0,
            }
        }
    }

    pub fn contains(&self, model: &GiqsModel, x: &[f64]) -> bool {
        let n = norm(x);
        n >= self.r_min.max(model.eval_radius()) && n <= self.r_max && model.cone().contains(x)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Rejection sample of a point in the domain, kept a little off the cone boundary.
fn sample_point(model: &GiqsModel, dom: &Annulus, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let d = model.dim();
    let lo = dom.r_min.max(model.eval_radius());
    if lo > dom.r_max {
        return Err(GiqsError::EmptyDomain("annulus lies inside the evaluation radius".into()));
    }
    for _ in 0..100_000 {
        let u = random_unit(rng, d);
        // uniform in volume
        let t: f64 = rng.random();
        let r = (lo.powi(d as i32) + t * (dom.r_max.powi(d as i32) - lo.powi(d as i32))).powf(1.0 / d as f64);
        let x: Vec<f64> = u.iter().map(|c| c * r).collect();
        if model.cone().margin(&x) > 1e-3 * r && dom.contains(model, &x) {
            return Ok(x);
        }
    }
    Err(GiqsError::EmptyDomain("no sample point found in the cone".into()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal basis of a random `s`-dimensional subspace orthogonal to `w`.
fn random_subspace_perp(rng: &mut ChaCha8Rng, w: &[f64], s: usize) -> Vec<Vec<f64>> {
    let d = w.len();
    let wn = norm(w);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(s);
    let mut against: Vec<Vec<f64>> = vec![w.iter().map(|x| x / wn).collect()];
    while basis.len() < s {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for _ in 0..2 {
            for b in against.iter() {
                let c = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= c * bi;
                }
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            let v: Vec<f64> = v.into_iter().map(|x| x / n).collect();
            against.push(v.clone());
            basis.push(v);
        }
    }
    basis
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteepVerdict {
    Steep,
    /// The envelope vanishes on the whole ξ grid.
    NotSteep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteepnessEstimate {
    pub s: usize,
    pub alpha: Option<f64>,
    pub coefficient: Option<f64>,
    pub fit_r2: Option<f64>,
    /// Steepness radius: the largest ξ probed.
    pub radius: f64,
    pub inf_grad: f64,
    pub verdict: SteepVerdict,
    pub n_points: usize,
    pub n_subspaces: usize,
    pub xi_grid: Vec<f64>,
    /// Lower envelope (over points and subspaces) of the running max, per ξ.
    pub envelope: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteepnessOptions {
    pub s: usize,
    pub n_points: usize,
    pub n_subspaces: usize,
    pub xi_grid: Vec<f64>,
    /// η samples per unit of the ξ grid's largest value.
    pub n_eta: usize,
    /// Directions sampled on the unit sphere of M before refinement.
    pub n_directions: usize,
    /// `inf |w|` below this means a vanishing gradient.
    pub grad_threshold: f64,
    /// Envelope values below `noise_floor · inf|w|` are treated as zero.
    pub noise_floor: f64,
    pub seed: u64,
}

impl SteepnessOptions {
    pub fn new(s: usize, seed: u64) -> Self {
        SteepnessOptions {
            s,
            n_points: 32,
            n_subspaces: 4,
            xi_grid: (0..13).map(|i| 10f64.powf(-3.0 + 0.25 * i as f64)).collect(),
            n_eta: 64,
            n_directions: 48,
            grad_threshold: 1e-8,
            noise_floor: 1e-9,
            seed,
        }
    }
}

/// `min_{u ∈ M, |u|=1} |Π_M w(a + η u)|`, `None` when every probe leaves the domain.
fn inner_min(
    model: &GiqsModel,
    a: &[f64],
    m: &[Vec<f64>],
    eta: f64,
    n_dir: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>> {
    let s = m.len();
    let eval = |coef: &[f64]| -> Result<Option<f64>> {
        let u: Vec<f64> = (0..a.len())
            .map(|i| m.iter().zip(coef).map(|(b, c)| b[i] * c).sum())
            .collect();
        let x: Vec<f64> = a.iter().zip(&u).map(|(ai, ui)| ai + eta * ui).collect();
        // probes may leave the annulus but not the model's domain
        if !model.cone().contains(&x) || norm(&x) < model.eval_radius() {
            return Ok(None);
        }
        let w = model.gradient(&x)?;
        let proj: f64 = m.iter().map(|b| dot(&w, b).powi(2)).sum::<f64>().sqrt();
        Ok(Some(proj))
    };
    let mut best: Option<f64> = None;
    let mut upd = |v: Option<f64>| {
        if let Some(v) = v {
            best = Some(best.map_or(v, |b: f64| b.min(v)));
        }
    };
    match s {
        1 => {
            upd(eval(&[1.0])?);
            upd(eval(&[-1.0])?);
        }
        2 => {
            let n = n_dir.max(8);
            let mut vals = Vec::with_capacity(n);
            for i in 0..n {
                let th = std::f64::consts::TAU * i as f64 / n as f64;
                let v = eval(&[th.cos(), th.sin()])?;
                vals.push((th, v));
                upd(v);
            }
            // golden-section refinement around the sampled argmin
            if let Some((th0, _)) = vals
                .iter()
                .filter_map(|(t, v)| v.map(|v| (*t, v)))
                .min_by(|x, y| x.1.total_cmp(&y.1))
            {
                let h = std::f64::consts::TAU / n as f64;
                let (mut lo, mut hi) = (th0 - h, th0 + h);
                let g = (5f64.sqrt() - 1.0) / 2.0;
                for _ in 0..30 {
                    let t1 = hi - g * (hi - lo);
                    let t2 = lo + g * (hi - lo);
                    let f1 = eval(&[t1.cos(), t1.sin()])?;
                    let f2 = eval(&[t2.cos(), t2.sin()])?;
                    upd(f1);
                    upd(f2);
                    match (f1, f2) {
                        (Some(x), Some(y)) if x <= y => hi = t2,
                        (Some(_), Some(_)) => lo = t1,
                        _ => break,
                    }
                }
            }
        }
        _ => {
            for _ in 0..n_dir.max(16) * s {
                let c = random_unit(rng, s);
                upd(eval(&c)?);
            }
        }
    }
    Ok(best)
}

/// Estimates `(α_s, B_s)` by evaluating `max_{0<=η<=ξ} min_u |Π_M w(a+ηu)|`
/// for sampled points `a` and subspaces `M ⊥ w(a)`, then fitting the lower
/// envelope as `B ξ^α`.
pub fn steepness_profile(model: &GiqsModel, dom: &Annulus, opts: &SteepnessOptions) -> Result<SteepnessEstimate> {
    let d = model.dim();
    if opts.s == 0 || opts.s >= d {
        return Err(GiqsError::invalid(format!("s = {} must lie in 1..={}", opts.s, d.saturating_sub(1))));
    }
    if opts.xi_grid.is_empty() || opts.xi_grid.iter().any(|&x| !(x > 0.0)) {
        return Err(GiqsError::invalid("xi grid must be nonempty and positive"));
    }
    if opts.n_points == 0 || opts.n_subspaces == 0 {
        return Err(GiqsError::EmptyDomain("no sample points requested".into()));
    }
    let mut xi = opts.xi_grid.clone();
    xi.sort_by(f64::total_cmp);
    let xi_max = *xi.last().expect("nonempty");
    // η grid: the ξ grid itself, refined between consecutive values
    let mut etas = vec![0.0];
    let mut prev = 0.0;
    for &x in &xi {
        let n = (opts.n_eta / xi.len()).max(2);
        for i in 1..=n {
            etas.push(prev + (x - prev) * i as f64 / n as f64);
        }
        prev = x;
    }

    let per_point: Vec<(f64, Vec<Vec<f64>>)> = (0..opts.n_points)
        .into_par_iter()
        .map(|i| -> Result<(f64, Vec<Vec<f64>>)> {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64 + 1);
            let a = sample_point(model, dom, &mut rng)?;
            let w = model.gradient(&a)?;
            let wn = norm(&w);
            let mut profiles = Vec::with_capacity(opts.n_subspaces);
            if wn < opts.grad_threshold {
                return Ok((wn, profiles));
            }
            for _ in 0..opts.n_subspaces {
                let m = random_subspace_perp(&mut rng, &w, opts.s);
                let mut running = 0.0f64;
                let mut k = 0;
                let mut prof = Vec::with_capacity(xi.len());
                for &x in &xi {
                    while k < etas.len() && etas[k] <= x * (1.0 + 1e-12) {
                        if let Some(v) = inner_min(model, &a, &m, etas[k], opts.n_directions, &mut rng)? {
                            running = running.max(v);
                        }
                        k += 1;
                    }
                    prof.push(running);
                }
                debug_assert!(prof.windows(2).all(|p| p[0] <= p[1]));
                profiles.push(prof);
            }
            Ok((wn, profiles))
        })
        .collect::<Result<_>>()?;

    let inf_grad = per_point.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    if inf_grad < opts.grad_threshold {
        return Err(GiqsError::VanishingGradient(inf_grad));
    }
    let mut envelope = vec![f64::INFINITY; xi.len()];
    for (_, profs) in &per_point {
        for prof in profs {
            assert!(prof.windows(2).all(|p| p[0] <= p[1]), "running max must be nondecreasing");
            for (e, v) in envelope.iter_mut().zip(prof) {
                *e = e.min(*v);
            }
        }
    }
    let floor = opts.noise_floor * inf_grad;
    let (fx, fy): (Vec<f64>, Vec<f64>) = xi
        .iter()
        .zip(&envelope)
        .filter(|(_, &e)| e > floor)
        .map(|(x, e)| (*x, *e))
        .unzip();
    let mut est = SteepnessEstimate {
        s: opts.s,
        alpha: None,
        coefficient: None,
        fit_r2: None,
        radius: xi_max,
        inf_grad,
        verdict: SteepVerdict::NotSteep,
        n_points: opts.n_points,
        n_subspaces: opts.n_subspaces,
        xi_grid: xi,
        envelope,
    };
    if fx.len() >= 2 {
        let fit = fit_power_law(&fx, &fy)?;
        est.alpha = Some(fit.slope.max(1.0));
        est.coefficient = Some(fit.intercept.exp());
        est.fit_r2 = Some(fit.r2);
        est.verdict = SteepVerdict::Steep;
    }
    Ok(est)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalSegment {
    pub start: usize,
    pub len: usize,
    /// Length in the line parameter.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineReport {
    pub point: Vec<f64>,
    pub direction: Vec<f64>,
    pub t_range: (f64, f64),
    pub segments: Vec<CriticalSegment>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiedermanReport {
    pub n_lines: usize,
    pub n_samples: usize,
    pub zero_threshold: f64,
    /// Runs of this many consecutive samples (or more) are non-isolated.
    pub isolation_threshold: usize,
    pub lines: Vec<LineReport>,
    pub pass: bool,
}

pub const ISOLATION_THRESHOLD: usize = 3;

/// Largest `t` in `[0, t_cap]` with the segment `x0 + [0,t] v` inside the domain.
fn exit_time(model: &GiqsModel, dom: &Annulus, x0: &[f64], v: &[f64], t_cap: f64) -> f64 {
    let inside = |t: f64| {
        let x: Vec<f64> = x0.iter().zip(v).map(|(a, b)| a + t * b).collect();
        dom.contains(model, &x)
    };
    let steps = 256;
    let h = t_cap / steps as f64;
    let mut last = 0.0;
    for i in 1..=steps {
        let t = i as f64 * h;
        if !inside(t) {
            let (mut lo, mut hi) = (last, t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if inside(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return lo;
        }
        last = t;
    }
    t_cap
}

/// Samples `d/dt h(x0 + t v)` along one line and reports runs below the threshold.
pub fn check_line(
    model: &GiqsModel,
    dom: &Annulus,
    x0: &[f64],
    v: &[f64],
    n_samples: usize,
    zero_threshold: f64,
) -> Result<LineReport> {
    if !dom.contains(model, x0) {
        return Err(GiqsError::DegenerateLine);
    }
    let vn = norm(v);
    let v: Vec<f64> = v.iter().map(|x| x / vn).collect();
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let cap = 2.0 * dom.r_max;
    let t_hi = exit_time(model, dom, x0, &v, cap);
    let t_lo = -exit_time(model, dom, x0, &neg, cap);
    let len = t_hi - t_lo;
    if len <= 1e-9 * dom.r_max {
        return Err(GiqsError::DegenerateLine);
    }
    let spacing = len / n_samples as f64;
    let eps = (1e-4 * dom.r_max).min(0.25 * spacing);
    let at = |t: f64| -> Result<f64> {
        let x: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + t * b).collect();
        model.h_value(&x)
    };
    let mut below = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let t = t_lo + (i as f64 + 0.5) * spacing;
        let deriv = (at(t + eps)? - at(t - eps)?) / (2.0 * eps);
        below.push(deriv.abs() < zero_threshold);
    }
    let mut segments = Vec::new();
    let mut i = 0;
    while i < n_samples {
        if below[i] {
            let start = i;
            while i < n_samples && below[i] {
                i += 1;
            }
            let count = i - start;
            segments.push(CriticalSegment {
                start,
                len: count,
                length: count as f64 * spacing,
            });
        } else {
            i += 1;
        }
    }
    let pass = segments.iter().all(|s| s.len < ISOLATION_THRESHOLD);
    Ok(LineReport {
        point: x0.to_vec(),
        direction: v,
        t_range: (t_lo, t_hi),
        segments,
        pass,
    })
}

/// Random affine lines through the domain; passes iff every critical run is isolated.
pub fn niederman_check(
    model: &GiqsModel,
    dom: &Annulus,
    n_lines: usize,
    n_samples: usize,
    zero_threshold: f64,
    seed: u64,
) -> Result<NiedermanReport> {
    if !(zero_threshold > 0.0) || n_samples < ISOLATION_THRESHOLD {
        return Err(GiqsError::invalid("zero threshold must be positive and lines need at least 3 samples"));
    }
    let lines: Vec<LineReport> = (0..n_lines)
        .into_par_iter()
        .map(|i| -> Result<LineReport> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let mut last_err = GiqsError::DegenerateLine;
            for _ in 0..16 {
                let x0 = sample_point(model, dom, &mut rng)?;
                let v = random_unit(&mut rng, model.dim());
                match check_line(model, dom, &x0, &v, n_samples, zero_threshold) {
                    Err(GiqsError::DegenerateLine) => last_err = GiqsError::DegenerateLine,
                    other => return other,
                }
            }
            Err(last_err)
        })
        .collect::<Result<_>>()?;
    let pass = lines.iter().all(|l| l.pass);
    Ok(NiedermanReport {
        n_lines,
        n_samples,
        zero_threshold,
        isolation_threshold: ISOLATION_THRESHOLD,
        lines,
        pass,
    })
}
