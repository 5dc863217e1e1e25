pub mod ansatz;
pub mod checkpoint;
pub mod corrdiff;
pub mod data;
pub mod error;
pub mod hybrid;
pub mod metrics;
pub mod optim;
pub mod qsim;
pub mod rng;
pub mod tensor;
pub mod unet;

#[cfg(test)]
pub(crate) mod testing;

pub use error::{Error, Result};
