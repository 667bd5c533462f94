//! Partitioned conditional generalized linear models for categorical responses.

pub mod design;
pub mod error;
pub mod glm;
pub mod io;
pub mod link;
pub mod poset;
pub mod selection;
pub mod tree;

pub use error::{Error, Result};
