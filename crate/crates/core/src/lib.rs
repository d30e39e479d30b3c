//! Personalized, fact-consistent news headline generation on a desk-scale
//! transformer: a user-preference encoder, context-injection adapters and a
//! segment-level contrastive objective, trained jointly with the generator.

// Sentence span lists often hold a single span.
#![allow(clippy::single_range_in_vec_init)]

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fact;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod preference;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
