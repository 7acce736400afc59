//! Heterogeneous-architecture knowledge distillation for semantic
//! segmentation, sized to run on a single CPU core.

pub mod checkpoint;
pub mod cli;
pub mod cka;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod mechanisms;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prob;
pub mod projection;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod tensor_io;

pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE_LABEL};
pub use tape::{Tape, Var};
pub use tensor::{DType, Tensor};
