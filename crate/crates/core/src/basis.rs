//! Finite bases of joint eigenstates: lattice points times multiplicity slots.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{GiqsError, Result};
use crate::lattice::{enumerate_lattice_with_budget, ActionPoint, Budget};
use crate::models::GiqsModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisIndex {
    /// Position of the lattice point in [`Basis::points`].
    pub point: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Basis {
    pub points: Vec<ActionPoint>,
    pub states: Vec<BasisIndex>,
    /// First state of each point; states of one point are contiguous.
    pub first_state: Vec<usize>,
    pub multiplicity: Vec<usize>,
    #[serde(skip)]
    lookup: HashMap<Vec<i64>, usize>,
}

impl PartialEq for Basis {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points && self.states == other.states
    }
}

impl Basis {
    pub fn from_points(model: &GiqsModel, points: Vec<ActionPoint>) -> Self {
        let mut states = Vec::new();
        let mut first_state = Vec::with_capacity(points.len());
        let mut multiplicity = Vec::with_capacity(points.len());
        for (i, a) in points.iter().enumerate() {
            first_state.push(states.len());
            let n = model.multiplicity(a);
            multiplicity.push(n);
            states.extend((0..n).map(|slot| BasisIndex { point: i, slot }));
        }
        let lookup = points
            .iter()
            .enumerate()
            .map(|(i, a)| (a.index.clone(), i))
            .collect();
        Basis {
            points,
            states,
            first_state,
            multiplicity,
            lookup,
        }
    }

    /// Every state with `r_min <= |a| <= r_max` (and above the evaluation radius).
    pub fn annulus(model: &GiqsModel, r_min: f64, r_max: f64) -> Result<Self> {
        Basis::annulus_with_budget(model, r_min, r_max, Budget::from_env())
    }

    pub fn annulus_with_budget(model: &GiqsModel, r_min: f64, r_max: f64, budget: Budget) -> Result<Self> {
        let pts: Vec<ActionPoint> = enumerate_lattice_with_budget(model, r_min, r_max, budget)?
            .into_iter()
            .filter(|a| a.norm >= model.eval_radius())
            .collect();
        if pts.is_empty() {
            return Err(GiqsError::EmptyDomain(format!("no states in [{r_min}, {r_max}]")));
        }
        let b = Basis::from_points(model, pts);
        // dense operators on this basis
        budget.check("dense operator", (b.len() as f64).powi(2) * 16.0)?;
        Ok(b)
    }

    /// Rebuilds the index lookup after deserialization.
    pub fn reindex(&mut self) {
        self.lookup = self
            .points
            .iter()
            .enumerate()
            .map(|(i, a)| (a.index.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn point_of(&self, state: usize) -> &ActionPoint {
        &self.points[self.states[state].point]
    }

    /// Point position of a lattice index.
    pub fn find(&self, index: &[i64]) -> Option<usize> {
        self.lookup.get(index).copied()
    }

    pub fn state(&self, point: usize, slot: usize) -> usize {
        self.first_state[point] + slot
    }

    pub fn states_of(&self, point: usize) -> std::ops::Range<usize> {
        let s = self.first_state[point];
        s..s + self.multiplicity[point]
    }

    /// `ω` of every state.
    pub fn omegas(&self, model: &GiqsModel) -> Result<Vec<f64>> {
        let per_point: Vec<f64> = self.points.iter().map(|a| model.omega(a)).collect::<Result<_>>()?;
        Ok(self.states.iter().map(|s| per_point[s.point]).collect())
    }

    /// Joint action values of every state.
    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| self.points[s.point].coords.clone()).collect()
    }

    pub fn is_multiplicity_one(&self) -> bool {
        self.multiplicity.iter().all(|&m| m == 1)
    }
}
