//! Style-adaptive feature encoding, anchor projection with low-rank adapters,
//! and a three-term semantic-consistency objective, trained and evaluated on a
//! synthetic multi-style dataset with known content and style factors.

pub mod diffcore;
pub mod error;

pub use error::{Error, Result};
pub mod seed;
pub mod synthstyle;
mod codec;
pub mod csfe;
pub mod saicd;
pub mod ascm;
pub mod model;
pub mod trainkit;
pub mod evalkit;
pub mod pipeline;
