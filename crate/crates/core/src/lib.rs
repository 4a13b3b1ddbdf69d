//! Stroke-level sketch abstraction trained with policy-gradient reinforcement learning.

pub mod agent;
pub mod classifier;
pub mod corpus;
pub mod env;
pub mod nn;
pub mod photo2sketch;
pub mod raster;
pub mod retrieval;
pub mod sketch;
pub mod trainer;
