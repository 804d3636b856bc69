//! Iterative DPO with a trajectory-merged reference model.
//!
//! Each round trains a policy with DPO against a reference built from the
//! policies of earlier rounds: the previous policy, the SFT model, a uniform
//! parameter average, or a learned softmax-weighted average.
//!
//! Numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common `f64` case.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dpo;
pub mod error;
pub mod eval;
pub mod merge;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod scalar;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Checkpoint = policy::PolicyCheckpoint<f64>;
pub type Checkpoint32 = policy::PolicyCheckpoint<f32>;
pub type Trajectory = merge::Trajectory<f64>;
pub type Trajectory32 = merge::Trajectory<f32>;
pub type MergeWeights = merge::MergeWeights<f64>;
