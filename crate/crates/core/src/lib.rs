pub mod calibration;
pub mod error;
pub mod int_engine;
pub mod kernels;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod perf;
pub mod pipeline;
pub mod quantizer;
pub mod reference;
pub mod scene;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
