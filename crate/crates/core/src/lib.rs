//! Cluster-induced mask transformer for joint 3D segmentation and
//! classification, with synthetic phantoms, baselines and ROC statistics.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod layers;
pub mod maskformer;
pub mod modelcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod volume;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{ModelConfig, Preset};
pub use params::{ModelParams, ParamStore, Session};
pub use tensor::{Tape, Tensor, Var};
pub use volume::{LabelMap, VolumeSample};
