//! The guide's chapters, re-exposed as rustdoc so every code block in
//! `book/src/*.md` compiles and runs under `cargo test --doc`. mdbook
//! renders the same files but cannot execute them; this keeps the book and
//! the library honest with each other.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}

#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
