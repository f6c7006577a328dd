pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod pipeline;
pub mod retrieval;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
