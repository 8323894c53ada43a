//! Offline evaluation: response metrics and the multi-session self-chat harness.

pub mod harness;
pub mod metrics;

pub use harness::*;
pub use metrics::{bleu_n, char_f1, distinct_n, evaluate_generation, tokenize_for_metrics, GenerationReport};
