pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod perturb;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
