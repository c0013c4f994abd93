pub mod error;
pub mod fusion;
pub mod blocks;
pub mod checks;
pub mod config;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod netpbm;
pub mod par;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
