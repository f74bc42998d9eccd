//! Interpretable concept-space projection of frozen vision-language
//! embeddings: training, zero-shot evaluation, explanations, ablation
//! faithfulness, region alignment and structure diagnostics.

pub mod concept;
pub mod error;
pub mod eval;
pub mod explain;
pub mod faithfulness;
pub mod manifest;
pub mod rank;
pub mod spatial;
pub mod store;
pub mod structure;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
