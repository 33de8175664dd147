//! Coarse-to-fine hierarchical classification for many-class few-shot
//! learning, with a memory-augmented attention KNN head.

pub mod cli;
pub mod data;
pub mod error;
pub mod hierarchy;
pub mod memory;
pub mod model;
pub mod ndgrad;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
