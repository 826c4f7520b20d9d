//! Transporting randomized-trial treatment effects to a target population
//! from aggregate data.
//!
//! The pipeline: ingest per-trial effect estimates and covariate moments
//! ([`aggdata`]), exponentially tilt a base covariate sample to each trial
//! ([`tilting`]), fit a parametric CATE by GMM on the stacked representer
//! moments ([`cate`], [`gmm`]) with plug-in variance ([`inference`]), and
//! marginalize over the target sample ([`estimands`]). [`synthpop`] builds
//! covariate samples from summaries and [`simulate`] runs the simulation
//! study.

pub mod aggdata;
pub mod cate;
pub mod error;
pub mod estimands;
pub mod glm;
pub mod gmm;
pub mod inference;
pub mod linalg;
pub mod par;
pub mod simulate;
pub mod synthpop;
pub mod tilting;

pub use error::{Error, Result};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
