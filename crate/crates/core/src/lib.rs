//! Failure exploration and analysis for object-detection models.
//!
//! Annotated objects and model predictions are matched by a minimum-cost
//! assignment, each image is classified into failure modes, and results are
//! aggregated per persona, scenario or model.

pub mod assignment;
pub mod backends;
pub mod catalog;
pub mod classify;
pub mod explore;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod store;
