//! Numerical toolkit for globally integrable quantum systems.

pub mod basis;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod lattice;
pub mod linalg;
pub mod models;
pub mod normalform;
pub mod partition;
pub mod report;
pub mod steepness;

pub use basis::{Basis, BasisIndex};
pub use error::{GiqsError, Result};
pub use lattice::{enumerate_lattice, ActionPoint, Cone};
pub use models::GiqsModel;
