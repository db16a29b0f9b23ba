//! Conditional masked language model for non-autoregressive translation,
//! trained with multi-view subset regularization.

pub mod ablation;
pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod ema;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod masking;
pub mod model;
pub mod optim;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
