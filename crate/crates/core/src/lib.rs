pub mod adapt;
pub mod cluster;
pub mod data;
pub mod diversity;
pub mod encoder;
pub mod error;
pub mod head;
pub mod meta;
pub mod optim;
pub mod prompt;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
