pub mod classify;
pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod seed;
pub mod selfcheck;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
