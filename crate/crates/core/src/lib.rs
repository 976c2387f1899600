pub mod archive;
pub mod audit;
pub mod corpus;
pub mod encoder;
pub mod generator;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod grounding;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod retrieval;
pub mod scoring;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
