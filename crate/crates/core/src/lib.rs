//! Curriculum pre-training for end-to-end speech translation: data
//! handling, word alignment, the encoder-decoder model, training objectives
//! and the phase scheduler.

pub mod align;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod model;
pub mod train;

pub use error::{Error, Result};
