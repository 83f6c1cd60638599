pub mod adaptation;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod http;
pub mod linalg;
pub mod llm;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod selection;
pub mod store;
pub mod synth;
pub mod text;

pub use error::{Error, ErrorFamily, Result};
