//! Random interlacements on weighted product graphs `G x Z`: potential theory,
//! Poisson trajectory sampling, percolation events, renormalisation and estimators.

pub mod bits;
pub mod error;
pub mod estimators;
pub mod graphs;
pub mod interlacements;
pub mod linalg;
pub mod percolation;
pub mod potential;
pub mod renorm;
pub mod scalar;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
pub use graphs::{SiteId, SiteSet};
pub use scalar::Scalar;

pub type Graph = graphs::WeightedGraph<f64>;
pub type Graph32 = graphs::WeightedGraph<f32>;
