//! Numerical laboratory for comparing activation steering with weight
//! fine-tuning on a toy GLU transformer block.

pub mod adapters;
pub mod bounds;
pub mod error;
pub mod firstorder;
pub mod harness;
pub mod nanomodel;
pub mod numkit;
pub mod rng;
pub mod subspace;
pub mod trainer;

pub use error::{Error, Result};
