//! Low-rank determinantal point processes (DPPs) learned from sets of items.
//!
//! The kernel is parametrized as `L = V Vᵀ` with `V` an `M × K` factor. Models
//! can be fit by maximum likelihood, by contrastive estimation against
//! dynamic, explicit or product-distribution negatives, or by noise
//! contrastive estimation. Next-item predictions are served by conditioning
//! through the `K × K` dual kernel, which keeps the cost linear in the catalog
//! size.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditioning;
pub mod data;
pub mod dpp;
pub mod error;
pub mod eval;
pub mod factor;
mod linalg;
pub mod model_file;
pub mod negatives;
pub mod par;
pub mod rng;
pub mod timing;
pub mod training;

pub use error::{DppError, Result};
pub use factor::{Basket, KernelFactor};
