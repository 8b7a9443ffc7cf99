//! Task-driven user profile generation for LLM recommenders.
//!
//! The pipeline samples diverse profiles from long interaction histories,
//! scores each profile by whether it makes a downstream sentiment prediction
//! correct, and turns the results into chosen/rejected preference pairs.

// `!(x > 0.0)` rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod corpus;
pub mod dpocore;
pub mod evaluate;
pub mod explore;
pub mod fixture;
pub mod modelgate;
pub mod pairgen;
pub mod pipeline;
pub mod prompts;
pub mod runstore;
