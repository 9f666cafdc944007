#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baseline;
pub mod channel;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use baseline::{BaselineConfig, LinkModel};
pub use channel::NormalizerState;
pub use encoder::{HeadMode, Neighborhood};
pub use error::{Error, Result};
pub use geometry::{Point3, PointCloud};
pub use metrics::MetricsConfig;
pub use model::{Model, ModelConfig};
pub use tensor::Matrix;
pub use training::{EvalConfig, TrainConfig, Trained};
