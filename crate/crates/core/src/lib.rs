//! Retrieval over a learned user-item relevance metric.
//!
//! - [`data`]: records, synthetic generator, dataset text format.
//! - [`metric`]: projectors, the MLP relevance metric, fp16 quantization.
//! - [`train`]: regression + rank-alignment objective and the training loop.
//! - [`index`]: layered navigable graph over item embeddings.
//! - [`search`]: candidate pool, brute force, greedy and parallel graph search.
//! - [`batch`]: aggregation queue that packs irregular evaluation requests
//!   into fixed-size engine batches.
//! - [`eval`]: coverage/recall metrics and the end-to-end experiment runner.

pub mod batch;
pub mod data;
pub mod error;
pub mod eval;
pub mod metric;
pub mod index;
pub mod search;
pub mod train;

pub use error::{Error, Result};
