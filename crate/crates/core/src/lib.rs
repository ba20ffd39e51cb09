//! Soft silhouette, supervised contrastive and baseline metric-learning
//! objectives with exact gradients, plus a small trainable encoder and the
//! experiment driver around them.

pub mod baselines;
pub mod data;
pub mod embedding;
pub mod error;
pub mod kv;
pub mod model;
pub mod numerics;
pub mod sil_loss;
pub mod supcon;
pub mod trainer;

pub use error::{Error, Result};
