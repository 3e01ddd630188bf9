pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod phantom;
pub mod trainer;

pub use error::{Result, UaganError};
