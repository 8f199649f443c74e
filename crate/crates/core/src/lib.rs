//! Composed video retrieval over precomputed embeddings.
//!
//! A query is a video clip plus a modification instruction. Strategies range
//! from vector fusion baselines to captioning the query, rewriting the caption
//! with the instruction, and ranking the gallery by the rewritten text, either
//! over the whole gallery or inside a visually filtered candidate set.

pub mod benchmark;
pub mod compose;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod formats;
pub mod fusion;
pub mod index;
pub mod pipeline;
pub mod store;
pub mod synthetic;

pub use embedding::{ClipId, Embedding, FrameEmbeddings};
pub use error::{CvrError, Result};
pub use index::{GalleryIndex, RankedList, ScoredEntry};
pub use pipeline::{PipelineConfig, RetrievalOutcome, SearchSpace, Strategy, TextSource};
