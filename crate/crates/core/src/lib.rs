pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dnn;
pub mod error;
pub mod experiments;
pub mod eval;
pub mod gp_layer;
pub mod kernel;
pub mod model;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
