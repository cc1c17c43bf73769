//! Bayesian spatiotemporal factor analysis with probit stick-breaking
//! spatial clustering and nearest-neighbor Gaussian process priors.

pub mod cluster;
pub mod covspatial;
pub mod covtemporal;
pub mod data;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod gibbs;
pub mod linalg;
pub mod nngp;
pub mod predict;
pub mod psbp;
pub mod rng;
pub mod simulate;
pub mod spatialprior;

pub use error::{Error, Result};
