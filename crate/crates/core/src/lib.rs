//! Out-of-core mini-batch GNN training engine over file-backed virtual block
//! devices.
//!
//! The engine demonstrates that storage-resident feature data does not have
//! to cost training throughput when three mechanisms work together:
//!
//! * a decoupled asynchronous IO stack ([`iostack`]) over virtual NVMe-like
//!   shard devices ([`storage`]), where submission workers never idle waiting
//!   for completions;
//! * a two-tier hotness-based feature cache ([`cache`]) populated from one
//!   pre-sampling epoch;
//! * a two-level operator pipeline ([`pipeline`]) that overlaps storage
//!   access, sampling, cache traffic, and training across mini-batches.
//!
//! [`engine::Engine`] wires the pieces together for epoch runs; the
//! `bench` CLI drives it for dataset generation, raw IO benchmarks, and
//! ablation studies.

pub mod cache;
pub mod config;
pub mod engine;
pub mod error;
pub mod feature;
pub mod gen;
pub mod graph;
pub mod iostack;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod storage;
pub mod trainer;

pub use config::EngineConfig;
pub use engine::Engine;
pub use error::{EngineError, Result};
pub use graph::{CsrTopology, VertexId};
