//! Caption-augmented, retrieval-based wound-infection classification.

pub mod autograd;
pub mod captioner;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod fusion;
pub mod imaging;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod retrieval;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
