//! Weight-level fingerprints for transformer checkpoints.
//!
//! Two compact descriptors are extracted per model: the per-projection
//! standard-deviation vector (seven normalized stds over the concatenated
//! Q/K/V/O/Gate/Up/Down groups) and the clustering vector (per-kind means of
//! K-Means labels over normalized top-rank singular-value profiles, aligned
//! to the query kind). The same pipelines run over composed LoRA deltas
//! (B A), which makes base-vs-adapter provenance checks a single comparison.
//!
//! The crate reads (possibly sharded) safetensors checkpoints, widens every
//! tensor to f64, and keeps all analysis deterministic: fixed seeds, ordered
//! reductions, and schedule-independent parallelism.

pub mod checkpoint;
pub mod cluster;
pub mod error;
pub mod export;
pub mod fixtures;
pub mod linalg;
pub mod lora;
pub mod report;
pub mod spectral;
pub mod stats;
pub mod taxonomy;

pub use error::{Error, ErrorClass, Result};
