//! Unit-consistent canonicalization and gauge-equivariant training.

pub mod canon;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gauge;
pub mod graph;
pub mod optim;
pub mod tensor;
mod union_find;

pub use error::{Error, Result};
