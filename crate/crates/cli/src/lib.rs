//! Command implementations behind the `condflow` binary.

pub mod check;
pub mod error;
pub mod imageio;
pub mod run;
