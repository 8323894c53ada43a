//! Long-term persona memory for open-domain dialogue.
//!
//! Persona sentences are extracted from each utterance, written to a
//! per-speaker memory with near-duplicate replacement, read back by
//! similarity to the dialogue context, and packed into the generator
//! input under fixed token budgets.

pub mod assembly;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod extractor;
pub mod memory;
pub mod pipeline;
pub mod remote;
pub mod session;
pub mod types;

pub use config::EngineConfig;
pub use error::{BackendError, BackendErrorKind, Error, Result};
pub use pipeline::{Engine, TurnOutcome, TurnPlan};
pub use session::{Session, SharedMemory};
pub use types::{DialogueContext, PersonaSentence, PersonaSource, Speaker, Utterance};
