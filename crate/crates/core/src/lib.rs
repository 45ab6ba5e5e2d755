pub mod analysis;
pub mod corpus;
pub mod error;
pub mod objectives;
pub mod rng;
pub mod search;
pub mod seq_model;
pub mod stochastic;
pub mod toy;
pub mod trainer;

pub use error::{MsvedError, Result};
