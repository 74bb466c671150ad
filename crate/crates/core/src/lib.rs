//! Decoupled vision-language graph matching.
//!
//! Visual graphs built from query embeddings are aligned with linguistic
//! graphs built from a knowledge base of (part, class) and (state, class)
//! phrases. Per-class subgraphs are matched through an entropic transport
//! plan, the hard matches become tri-state supervision, and a squared
//! similarity loss pulls visual nodes toward every class that shares the
//! matched part or state.

pub mod assignment;
pub mod cli;
pub mod error;
pub mod graphs;
pub mod losses;
pub mod pipeline;
pub mod sinkhorn;
pub mod tensor;

pub use error::{Error, Result};
