pub mod cli;
pub mod data;
pub mod detect;
pub mod error;
pub mod evalkit;
pub mod fedsim;
pub mod gradcore;
pub mod io;
pub mod property;
pub mod seer;

pub use error::{Error, Result};
