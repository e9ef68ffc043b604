pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod image;
pub mod checkpoint;
pub mod cssl;
pub mod data;
pub mod encoder;
pub mod gradsuite;
pub mod io;
pub mod manifest;
pub mod nn;
pub mod probe;
pub mod saem;
pub mod sieb;
pub mod rng;
pub mod ssp;
pub mod synth;
