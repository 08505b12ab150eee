//! Cooperative sensor self-localization and distributed target tracking
//! with particle belief propagation and likelihood consensus.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod consensusnet;
pub mod harness;
pub mod lconsensus;
pub mod msgpass;
pub mod particles;
pub mod rng;
pub mod scenario;
pub mod statespace;
pub mod stats;
