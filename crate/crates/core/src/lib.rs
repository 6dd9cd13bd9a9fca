#![allow(clippy::needless_range_loop)]

pub mod backward;
pub mod cones;
pub mod error;
pub mod forward;
pub mod harness;
pub mod lattice;
pub mod oracles;

pub use error::{LabError, Result};
