//! Prototype-guided prompt learning for domain-incremental classification on
//! top of a frozen dual encoder.

mod error;
pub mod conditioned;
pub mod config;
pub mod container;
pub mod datagen;
pub mod discriminator;
pub mod encoder;
pub mod inference;
pub mod metrics;
pub mod prompt;
pub mod pipeline;
pub mod prototype;
pub mod pretrain;
pub mod report;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
