//! Sparse-training lab: masked MLPs with normalisation layers, sparsity-aware
//! preconditioning, dynamic sparse training and the one-neuron flow models.

pub mod dst;
pub mod error;
pub mod exec;
pub mod flows;
pub mod gradcheck;
pub mod lab;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod sparsity;

pub use error::{LabError, Result};
