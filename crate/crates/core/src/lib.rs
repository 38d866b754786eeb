//! Iterative safe planning with conformal uncertainty tubes.

pub mod conformal;
pub mod convergence;
pub mod dynamics;
pub mod episodic;
pub mod error;
pub mod harness;
pub mod planner;
pub mod radius_update;
pub mod seeds;
pub mod sensitivity;

pub use error::{Error, Result};
