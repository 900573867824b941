//! Financial numerical-reasoning QA toolkit.
//!
//! Retrieval of supporting facts and definitions, an arithmetic program DSL
//! with structurally masked decoding and execution, a small trainable
//! symbolic decoder, prompt construction for external generators and an
//! evaluation harness.

pub mod dsl;
pub mod executor;
pub mod preprocess;
pub mod retrieval;
pub mod decoder;
pub mod synthetic;
pub mod llmgen;
pub mod eval;
pub mod pipeline;
