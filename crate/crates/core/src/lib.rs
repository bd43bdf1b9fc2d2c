pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
