pub mod align;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod evalkit;
pub mod formats;
pub mod neural;
pub mod ppo;
pub mod reference;
pub mod tracking;

pub use error::{Error, Result};
