pub mod coin;
pub mod disorder;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod lattice;
pub mod linalg;
pub mod mc;
pub mod resolvent;
pub mod spectral;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
