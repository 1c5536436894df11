pub mod augment;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod transformer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
