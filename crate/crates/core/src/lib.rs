//! Cross-modal distillation with relaxed noun text inputs.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod experiments;
pub mod lexicon;
pub mod losses;
pub mod models;
pub mod nn;
pub mod relaxation;
pub mod store;
pub mod training;

pub use error::{Error, Result};
