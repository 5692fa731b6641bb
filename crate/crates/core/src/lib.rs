//! Similarity-rank coreset filtering for paired image/text embeddings and
//! weighted low-rank adapters (WoRA) with their LoRA and DoRA special cases.

pub mod adapters;
pub mod embio;
pub mod error;
pub mod filtering;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod metrics;

pub use adapters::{AdapterGradients, AdapterKind, AdapterState, ParamCount};
pub use embio::EmbeddingMatrix;
pub use error::{Error, Result};
pub use filtering::{DistractorPool, FilterConfig, FilterReport, PairedDataset};
pub use linalg::{Matrix, RowVector};
