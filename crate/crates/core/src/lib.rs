#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Sparse personalized federated learning by correlation maximization, with
//! baseline strategies and a linear sparse-recovery lab.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod fedcore;
pub mod metrics;
pub mod models;
pub mod sparsity;
pub mod theorylab;

pub use error::{Error, Result};
