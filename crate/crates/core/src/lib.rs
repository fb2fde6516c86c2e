//! Expectation-maximization pre-training for multi-party dialogue response
//! generation, treating each response's addressee as a latent variable.

pub mod corpus;
pub mod em;
pub mod error;
pub mod eval;
pub mod model;
pub mod text;

pub use error::{Error, Result};
