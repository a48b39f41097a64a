pub mod checkpoint;
pub mod config;
pub mod dpat;
pub mod encoder;
pub mod episodes;
pub mod experiment;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod mask;
pub mod maskdec;
pub mod model;
pub mod mpg;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
