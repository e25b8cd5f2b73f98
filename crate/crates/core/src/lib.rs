//! Topic-prompted dense passage retrieval.

mod params;

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod prompt_bank;
pub mod retrieval;
pub mod tensor;
pub mod topic_model;
pub mod trainer;

pub use error::{Error, Result};
