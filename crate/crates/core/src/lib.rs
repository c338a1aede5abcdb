pub mod envsim;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod masking;
pub mod numerics;
pub mod probe;
pub mod runner;

pub use error::{Error, Result};
