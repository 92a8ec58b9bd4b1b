//! Low-rank factorized multi-head attention for text classification.
//!
//! A document is embedded, encoded by a bidirectional GRU (or left as raw
//! embeddings), scored against a global context vector by `m` rank-1 bilinear
//! heads, pooled into an `m × d_ann` sentence embedding and classified by an
//! MLP. Training uses minibatch SGD with momentum and an optional head
//! disagreement penalty.

pub mod attention;
pub mod baseline;
pub mod bench;
pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod gru;
pub mod interpret;
pub mod model;
pub mod params;
pub mod rng;
pub mod synthetic;
pub mod text;
pub mod trainer;

pub use error::{LamaError, Result};
pub use lama_autodiff as autodiff;
