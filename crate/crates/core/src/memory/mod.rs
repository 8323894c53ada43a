//! Per-speaker long-term persona memory: dedup-on-write, thresholded top-k
//! read, and durable snapshots with a write-ahead log.

pub mod index;
pub mod persist;
mod store;

pub use index::{AnyIndex, ExhaustiveIndex, HnswIndex, HnswParams, VectorIndex};
pub use persist::{restore, snapshot, MemoryDir, Recovered, Wal, WalRecord};
pub use store::{
    read_both, CachedRescorer, Hit, MatcherRescorer, MemoryEntry, MemoryStore, ReadParams, ReadResult,
    Rescorer, WriteOutcome,
};
