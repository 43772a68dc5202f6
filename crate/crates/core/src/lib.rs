pub mod adjoint;
pub mod drivers;
pub mod harness;
pub mod error;
pub mod lower;
pub mod noise;
pub mod numeric;
pub mod problems;
pub mod riskaverse;

pub use error::{Error, Result};
