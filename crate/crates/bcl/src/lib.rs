//! Numerical toolkit for balanced contrastive losses on the unit
//! hypersphere: loss kernels, analytic gradients with finite-difference
//! validation, lower bounds with equality diagnostics, regular-simplex
//! geometry measurements, synthetic long-tailed data, and an SGD harness.

pub mod bounds;
pub mod config;
pub mod embedding;
pub mod error;
pub mod grad;
pub mod longtail;
pub mod loss;
pub mod optim;
pub mod simplex;

pub use error::{Error, Result};
