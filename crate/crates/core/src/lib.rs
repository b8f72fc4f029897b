pub mod cluster;
pub mod cra;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod proxy;
pub mod seeding;
pub mod synth;

pub use error::{RaplError, Result};
