//! Two-stage human-object interaction detection with a spatially guided
//! cross-attention decoder.
//!
//! Pipeline: detections are filtered and refined by a unary encoder, every
//! human-object pair becomes an explicit query carrying a box-pair positional
//! embedding, and a stack of decoder layers lets each pair attend to an image
//! feature map before action classification.

pub mod attention;
pub mod dataset;
pub mod datasyn;
pub mod decoder;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod pairing;
pub mod posembed;
pub mod trainer;

pub use error::{Error, Result};
