//! Location retrieval bounds for destination searches.
//!
//! A search request is mapped to a rectangular retrieval bound by one of
//! several policies: location-type heuristics, per-destination booking
//! statistics, a learned bounds regressor, or the same regressor with
//! MC-dropout upper-confidence-bound exploration. A synthetic booking world
//! and an experiment harness train and compare those policies in closed loop.

pub mod error;
pub mod featurizer;
pub mod geo;
pub mod harness;
pub mod model;
pub mod policy;
pub mod rng;
pub mod simworld;

pub use error::{Error, Result};
