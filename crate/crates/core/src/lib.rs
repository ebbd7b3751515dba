//! Fairness-aware meta-learning over geo-located data.
//!
//! A predictor is meta-trained over a distribution of spatial tasks while a
//! small referee network assigns per-location inner-loop learning rates that
//! steer the predictor toward equal prediction quality across locations.

pub mod diffengine;
pub mod geodata;
pub mod metrics;
pub mod nets;
pub mod tasks;
pub mod training;
