//! Action variables of the planar anharmonic oscillator
//! `|ξ|²/2 + |x|^{2ℓ}/(2ℓ)`: radial action by quadrature, the regularized
//! action `a1`, and inversion of `(a1, a2) -> E`.

use std::num::NonZeroUsize;
use std::sync::OnceLock;

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::error::{GiqsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnharmonicParams {
    pub ell: u32,
    /// Gauss-Legendre nodes of the base rule; the check rule uses twice as many.
    pub nodes: usize,
    /// Relative tolerance of the turning-point bisection.
    pub turning_tol: f64,
    /// Relative tolerance of the energy inversion.
    pub inversion_tol: f64,
}

impl AnharmonicParams {
    pub fn new(ell: u32) -> Self {
        AnharmonicParams {
            ell,
            nodes: 48,
            turning_tol: 1e-15,
            inversion_tol: 1e-14,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ell < 1 {
            return Err(GiqsError::invalid("anharmonic exponent ell must be >= 1"));
        }
        if self.nodes < 4 {
            return Err(GiqsError::invalid("quadrature needs at least 4 nodes"));
        }
        if !(self.turning_tol > 0.0 && self.inversion_tol > 0.0) {
            return Err(GiqsError::invalid("tolerances must be positive"));
        }
        Ok(())
    }

    /// Homogeneity degree `2ℓ/(ℓ+1)` of the energy in action variables.
    pub fn degree(&self) -> f64 {
        2.0 * self.ell as f64 / (self.ell as f64 + 1.0)
    }

    /// Effective radial potential `Mz²/(2r²) + r^{2ℓ}/(2ℓ)`.
    pub fn effective_potential(&self, mz: f64, r: f64) -> f64 {
        let l = self.ell as f64;
        mz * mz / (2.0 * r * r) + r.powi(2 * self.ell as i32) / (2.0 * l)
    }

    /// Energy of the circular orbit with angular momentum `mz`, the minimum of
    /// the effective potential.
    pub fn circular_energy(&self, mz: f64) -> f64 {
        let l = self.ell as f64;
        (l + 1.0) / (2.0 * l) * mz.abs().powf(2.0 * l / (l + 1.0))
    }

    /// Largest admissible |Mz| at energy `e`.
    pub fn max_angular_momentum(&self, e: f64) -> f64 {
        let l = self.ell as f64;
        (2.0 * l * e / (l + 1.0)).powf((l + 1.0) / (2.0 * l))
    }
}

fn rule(n: usize) -> &'static GaussLegendre {
    static CACHE: OnceLock<std::sync::Mutex<Vec<(usize, &'static GaussLegendre)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| std::sync::Mutex::new(Vec::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    if let Some((_, r)) = guard.iter().find(|(k, _)| *k == n) {
        return r;
    }
    let r: &'static GaussLegendre =
        Box::leak(Box::new(GaussLegendre::new(NonZeroUsize::new(n).expect("n > 0"))));
    guard.push((n, r));
    r
}

fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, rel_tol: f64) -> f64 {
    // f(lo) and f(hi) have opposite signs
    let f_lo_neg = f(lo) < 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || (hi - lo) <= rel_tol * hi.abs() {
            break;
        }
        if (f(mid) < 0.0) == f_lo_neg {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Turning points `0 <= r_m <= r_M` of the effective potential at energy `e`.
pub fn turning_points(params: &AnharmonicParams, e: f64, mz: f64) -> Result<(f64, f64)> {
    let gap = |r: f64| e - params.effective_potential(mz, r);
    let outer = |r_start: f64| -> Result<f64> {
        let mut r_big = r_start.max(1.0) * 2.0;
        let mut tries = 0;
        while gap(r_big) > 0.0 {
            r_big *= 2.0;
            tries += 1;
            if tries > 200 {
                return Err(GiqsError::Bracket(format!(
                    "no outer turning point for E={e}, Mz={mz}"
                )));
            }
        }
        Ok(bisect(gap, r_start, r_big, params.turning_tol))
    };
    if mz == 0.0 {
        return Ok((0.0, outer(0.0)?));
    }
    let l = params.ell as f64;
    let r_star = mz.abs().powf(1.0 / (l + 1.0));
    if gap(r_star) <= 0.0 {
        return Ok((r_star, r_star));
    }
    let mut r_small = r_star * 0.5;
    let mut tries = 0;
    while gap(r_small) > 0.0 {
        r_small *= 0.5;
        tries += 1;
        if tries > 2000 {
            return Err(GiqsError::Bracket(format!(
                "no inner turning point for E={e}, Mz={mz}"
            )));
        }
    }
    let r_m = bisect(gap, r_small, r_star, params.turning_tol);
    let r_mx = outer(r_star)?;
    Ok((r_m, r_mx))
}

fn radial_integral(params: &AnharmonicParams, e: f64, mz: f64, r_m: f64, r_mx: f64, n: usize) -> f64 {
    // r = r_m + (r_M - r_m) sin²θ removes the square-root endpoint behaviour.
    let width = r_mx - r_m;
    let integrand = |theta: f64| {
        let (s, c) = theta.sin_cos();
        let r = r_m + width * s * s;
        let g = (e - params.effective_potential(mz, r)).max(0.0);
        g.sqrt() * 2.0 * width * s * c
    };
    rule(n).integrate(0.0, std::f64::consts::FRAC_PI_2, integrand)
}

/// Radial action `(√2/π) ∫_{r_m}^{r_M} √(E − V*_Mz(r)) dr`.
pub fn radial_action(params: &AnharmonicParams, e: f64, mz: f64) -> Result<f64> {
    if !(e > 0.0) || !e.is_finite() || !mz.is_finite() {
        return Err(GiqsError::invalid(format!("radial action needs E > 0, got {e}")));
    }
    let m_max = params.max_angular_momentum(e);
    if mz.abs() > m_max * (1.0 + 1e-12) {
        return Err(GiqsError::invalid(format!(
            "|Mz| = {} outside the admissible region |Mz| < {m_max} at E = {e}",
            mz.abs()
        )));
    }
    if e <= params.circular_energy(mz) {
        return Ok(0.0);
    }
    let (r_m, r_mx) = turning_points(params, e, mz)?;
    if r_mx <= r_m {
        return Ok(0.0);
    }
    let pref = std::f64::consts::SQRT_2 / std::f64::consts::PI;
    let mut n = params.nodes;
    let mut coarse = radial_integral(params, e, mz, r_m, r_mx, n);
    for _ in 0..4 {
        let fine = radial_integral(params, e, mz, r_m, r_mx, 2 * n);
        if (fine - coarse).abs() <= 1e-13 * fine.abs().max(1e-300) + 1e-15 {
            return Ok(pref * fine);
        }
        coarse = fine;
        n *= 2;
    }
    Err(GiqsError::Quadrature(format!(
        "radial action at E={e}, Mz={mz} did not settle with {n} nodes"
    )))
}

/// The action `a1`, analytic across `Mz = 0`: `a_r` for `Mz >= 0`, `a_r − Mz` for `Mz < 0`.
pub fn regularized_action_a1(params: &AnharmonicParams, e: f64, mz: f64) -> Result<f64> {
    let ar = radial_action(params, e, mz)?;
    Ok(if mz < 0.0 { ar - mz } else { ar })
}

/// Energy `E` with `a1(E, a2) = a1`, by bisection on the monotone map `E -> a1`.
pub fn invert_actions(params: &AnharmonicParams, a1: f64, a2: f64) -> Result<f64> {
    let floor = if a2 < 0.0 { -a2 } else { 0.0 };
    if !(a1 >= floor) {
        return Err(GiqsError::OutOfCone(vec![a1, a2]));
    }
    if a1 == 0.0 && a2 == 0.0 {
        return Ok(0.0);
    }
    let e_lo0 = params.circular_energy(a2);
    if a1 == floor {
        return Ok(e_lo0);
    }
    let f = |e: f64| -> Result<f64> { Ok(regularized_action_a1(params, e, a2)? - a1) };
    let mut lo = e_lo0;
    let mut hi = (e_lo0 * 2.0).max(1.0);
    let mut tries = 0;
    while f(hi)? < 0.0 {
        lo = hi;
        hi *= 2.0;
        tries += 1;
        if tries > 200 {
            return Err(GiqsError::Bracket(format!(
                "cannot bracket the energy of actions ({a1}, {a2})"
            )));
        }
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if (hi - lo) <= params.inversion_tol * hi || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(GiqsError::NotConverged {
        iterations: 300,
        residual: hi - lo,
    })
}
