//! The joint-spectrum lattice `(Z^d + κ) ∩ C` and its enumeration over annuli.

use std::hash::{Hash, Hasher};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GiqsError, Result};
use crate::models::GiqsModel;

/// Default memory cap for lattice enumeration when `GIQS_BUDGET_MB` is unset.
pub const DEFAULT_BUDGET_MB: u64 = 1024;

/// A point of the joint spectrum. The real coordinates are `index + κ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionPoint {
    pub index: Vec<i64>,
    pub coords: Vec<f64>,
    pub norm: f64,
}

impl ActionPoint {
    pub fn new(index: Vec<i64>, kappa: &[f64]) -> Self {
        let coords: Vec<f64> = index
            .iter()
            .zip(kappa)
            .map(|(&n, &k)| n as f64 + k)
            .collect();
        let norm = coords.iter().map(|x| x * x).sum::<f64>().sqrt();
        ActionPoint {
            index,
            coords,
            norm,
        }
    }

    pub fn dim(&self) -> usize {
        self.index.len()
    }

    /// The point translated by an integer vector.
    pub fn shifted(&self, k: &[i64], kappa: &[f64]) -> Self {
        let index = self.index.iter().zip(k).map(|(a, b)| a + b).collect();
        ActionPoint::new(index, kappa)
    }
}

impl PartialEq for ActionPoint {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index
    }
}

impl Eq for ActionPoint {}

impl Hash for ActionPoint {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.index.hash(state);
    }
}

impl PartialOrd for ActionPoint {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ActionPoint {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.index.cmp(&other.index)
    }
}

const CONE_TOL: f64 = 1e-12;

/// Closed convex cones used by the shipped models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cone {
    /// All of R^d.
    Full,
    /// `x_i >= 0` for every i.
    Orthant,
    /// The anharmonic-oscillator cone: `a1 >= 0` if `a2 >= 0`, `a1 >= |a2|` if `a2 < 0`.
    Anharmonic,
}

impl Cone {
    pub fn contains(&self, x: &[f64]) -> bool {
        self.margin(x) >= -CONE_TOL * (1.0 + norm(x))
    }

    /// Signed distance-like margin: nonnegative inside the cone, larger deeper inside.
    pub fn margin(&self, x: &[f64]) -> f64 {
        match self {
            Cone::Full => f64::INFINITY,
            Cone::Orthant => x.iter().copied().fold(f64::INFINITY, f64::min),
            Cone::Anharmonic => {
                let (a1, a2) = (x[0], x[1]);
                // The cone is {a1 >= max(0, -a2)}; the boundary has slope 1 for a2 < 0.
                if a2 >= 0.0 {
                    a1
                } else {
                    (a1 + a2) / std::f64::consts::SQRT_2
                }
            }
        }
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Memory budget for enumerations, read from `GIQS_BUDGET_MB`.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub mb: u64,
}

impl Budget {
    pub fn from_env() -> Self {
        let mb = std::env::var("GIQS_BUDGET_MB")
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or(DEFAULT_BUDGET_MB);
        Budget { mb }
    }

    pub fn check(&self, what: &'static str, bytes: f64) -> Result<()> {
        let needed_mb = bytes / (1024.0 * 1024.0);
        if needed_mb > self.mb as f64 {
            return Err(GiqsError::Budget {
                what,
                needed_mb,
                budget_mb: self.mb,
            });
        }
        Ok(())
    }
}

impl Default for Budget {
    fn default() -> Self {
        Budget::from_env()
    }
}

fn index_range(kappa: f64, r_max: f64) -> (i64, i64) {
    let lo = (-r_max - kappa - 1e-9).ceil() as i64;
    let hi = (r_max - kappa + 1e-9).floor() as i64;
    (lo, hi)
}

/// All points of the model's joint spectrum with `r_min <= |a| <= r_max`, in
/// lexicographic order of their integer index.
pub fn enumerate_lattice(model: &GiqsModel, r_min: f64, r_max: f64) -> Result<Vec<ActionPoint>> {
    enumerate_lattice_with_budget(model, r_min, r_max, Budget::from_env())
}

pub fn enumerate_lattice_with_budget(
    model: &GiqsModel,
    r_min: f64,
    r_max: f64,
    budget: Budget,
) -> Result<Vec<ActionPoint>> {
    if !(r_min >= 0.0 && r_min < r_max) || !r_max.is_finite() {
        return Err(GiqsError::invalid(format!(
            "annulus needs 0 <= r_min < r_max, got [{r_min}, {r_max}]"
        )));
    }
    let d = model.dim();
    let kappa = model.kappa();
    let ranges: Vec<(i64, i64)> = kappa.iter().map(|&k| index_range(k, r_max)).collect();
    let box_size: f64 = ranges
        .iter()
        .map(|(lo, hi)| (hi - lo + 1).max(0) as f64)
        .product();
    let bytes_per_point = (std::mem::size_of::<ActionPoint>() + 16 * d) as f64;
    budget.check("lattice enumeration", box_size * bytes_per_point)?;

    let (lo0, hi0) = ranges[0];
    if hi0 < lo0 {
        return Ok(Vec::new());
    }
    let lo_sq = r_min * r_min * (1.0 - 1e-12);
    let hi_sq = r_max * r_max * (1.0 + 1e-12);
    let slabs: Vec<Vec<ActionPoint>> = (lo0..=hi0)
        .into_par_iter()
        .map(|first| {
            let mut out = Vec::new();
            let mut idx: Vec<i64> = ranges.iter().map(|r| r.0).collect();
            idx[0] = first;
            if ranges[1..].iter().any(|(lo, hi)| hi < lo) {
                return out;
            }
            loop {
                let coords: Vec<f64> = idx.iter().zip(kappa).map(|(&n, &k)| n as f64 + k).collect();
                let sq: f64 = coords.iter().map(|x| x * x).sum();
                if sq >= lo_sq && sq <= hi_sq && model.cone().contains(&coords) && model.in_spectrum(&idx) {
                    out.push(ActionPoint::new(idx.clone(), kappa));
                }
                // odometer over axes 1..d, last axis fastest
                let mut axis = d;
                loop {
                    if axis == 1 {
                        return out;
                    }
                    axis -= 1;
                    if idx[axis] < ranges[axis].1 {
                        idx[axis] += 1;
                        break;
                    }
                    idx[axis] = ranges[axis].0;
                }
            }
        })
        .collect();
    Ok(slabs.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{AnharmonicParams, GiqsModel};

    #[test]
    fn torus_disk_radius_two_has_13_points() {
        let m = GiqsModel::flat_torus(2);
        let pts = enumerate_lattice(&m, 0.0, 2.0).unwrap();
        let mut brute = 0;
        for x in -2i64..=2 {
            for y in -2i64..=2 {
                if x * x + y * y <= 4 {
                    brute += 1;
                }
            }
        }
        assert_eq!(brute, 13);
        assert_eq!(pts.len(), 13);
        assert!(pts.windows(2).all(|w| w[0].index < w[1].index));
    }

    #[test]
    fn sphere_points_are_shifted_integers() {
        let m = GiqsModel::sphere(2).unwrap();
        let pts = enumerate_lattice(&m, 0.0, 3.0).unwrap();
        let coords: Vec<f64> = pts.iter().map(|p| p.coords[0]).collect();
        assert_eq!(coords, vec![0.5, 1.5, 2.5]);
    }

    #[test]
    fn anharmonic_cone_excludes_points_below_the_diagonal() {
        let m = GiqsModel::anharmonic(AnharmonicParams::new(2)).unwrap();
        let pts = enumerate_lattice(&m, 0.0, 1.5).unwrap();
        assert!(!pts.is_empty());
        for p in &pts {
            let (a1, a2) = (p.coords[0], p.coords[1]);
            assert!(!(a2 < 0.0 && a1 < a2.abs()), "{:?}", p.coords);
            assert!(a1 >= 0.0);
        }
        // (0.5, -1) violates a1 >= |a2|
        assert!(!pts.iter().any(|p| p.index == vec![0, -1]));
        assert!(pts.iter().any(|p| p.index == vec![0, 1]));
    }

    #[test]
    fn budget_rejects_huge_enumeration() {
        let m = GiqsModel::flat_torus(3);
        let err = enumerate_lattice_with_budget(&m, 0.0, 1e5, Budget { mb: 16 }).unwrap_err();
        assert!(matches!(err, GiqsError::Budget { .. }));
    }

    #[test]
    fn rejects_inverted_annulus() {
        let m = GiqsModel::flat_torus(2);
        assert!(enumerate_lattice(&m, 3.0, 2.0).is_err());
    }
}
