//! Contrastive learning of trajectory and instruction encoders whose
//! similarity acts as a language-conditioned reward, on a small synthetic
//! manipulation world.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod lcbc;
pub mod manifest;
pub mod objectives;
pub mod planner;
pub mod reward;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
