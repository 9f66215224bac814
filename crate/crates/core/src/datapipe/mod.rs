//! Corpus curation: scene cuts, sharpness and motion gates, pluggable
//! learned scorers, near-duplicate removal and tag balancing.

mod filter;
mod pipeline;
mod signals;

pub use filter::*;
pub use pipeline::*;
pub use signals::*;
