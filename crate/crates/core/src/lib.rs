//! Content-addressed, position-independent KV caching for MLA-style serving,
//! at desk scale.
//!
//! The pieces, bottom up:
//!
//! - [`model`]: tokens, segment-annotated requests, traces and their JSONL form.
//! - [`chunker`]: Gear-hash content-defined chunking with marker pinning,
//!   fixed-block chunking, XXH64 fingerprints.
//! - [`prefix_cache`]: the exact-prefix radix tree.
//! - [`rotary`]: rotary position embedding, delta rotation, bf16 emulation.
//! - [`kv_registry`]: fingerprint -> KV registry with a shared latent pool.
//! - [`engine`]: the per-request serve path and trace replay.
//! - [`workloads`]: deterministic agentic workload generators.
//! - [`analyzer`]: offline decomposition and chunking-strategy comparison.
//! - [`roc`]: position-invariance ROC/AUC harness.

pub mod analyzer;
pub mod chunker;
pub mod engine;
pub mod kv_registry;
pub mod model;
pub mod prefix_cache;
pub mod roc;
pub mod rotary;
pub mod workloads;
pub mod xxh64;

pub use chunker::{cdc_chunk, fingerprint, Chunk, ChunkerParams};
pub use engine::{EngineState, Mode, ServeConfig, ServeResult};
pub use model::{Request, Segment, SegmentKind, Token, TokenSeq, Trace};
pub use rotary::{Precision, RotarySpec};
