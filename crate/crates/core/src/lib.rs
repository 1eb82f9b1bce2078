//! Federated training of a miniature Vision Transformer.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
