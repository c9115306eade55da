//! Online low-rank compression of word-embedding layers.
//!
//! A text classifier (deep averaging network or LSTM) is trained, its
//! embedding table is replaced by a truncated-SVD factor pair, and training
//! continues through both factors. Alongside sit the cyclically annealed
//! learning-rate schedule, a fixed-point quantization baseline, an offline
//! SVD baseline, and closed-form FLOP/space/latency calculators.

pub mod analysis;
pub mod data;
pub mod embedding;
pub mod error;
pub mod format;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod quantize;

pub use error::{Error, Result};
