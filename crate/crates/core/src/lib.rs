//! D4 group-equivariant segmentation networks on the CPU.

pub mod cli;
pub mod dihedral;
pub mod error;
pub mod evalmetrics;
pub mod glayers;
pub mod kv;
pub mod net;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
