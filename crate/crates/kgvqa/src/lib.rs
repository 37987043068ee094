//! Knowledge-graph enhanced cross-modal Mamba architecture for medical
//! visual question answering, at desk scale.
//!
//! The crate implements the full pipeline — question-aware query alignment,
//! graph-attention knowledge embedding, cross-modal selective-scan fusion,
//! and multi-task heads — in plain double-precision Rust with explicit
//! backward passes, plus the training harness, CLI, and a complexity
//! benchmark for the linear-time fusion path. The accompanying mdbook under
//! `book/` walks through each subsystem; its code snippets compile as doc
//! tests of this crate.

pub mod error;
pub mod tensor;
pub mod params;
pub mod numerics;
pub mod encoders;
pub mod knowledge;
pub mod alignment;
pub mod fusion;
pub mod heads;
pub mod config;
pub mod synthetic;
pub mod model;
pub mod train;
pub mod bench;
pub mod gradcheck;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Compile the book's code snippets as doc tests so the guide cannot
/// drift from the crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/knowledge.md")]
    mod knowledge {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/heads.md")]
    mod heads {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
