pub mod app;
pub mod balls;
pub mod config;
pub mod error;
pub mod eval;
pub mod ground_truth;
pub mod imaging;
pub mod manifest;
pub mod segnet;
pub mod synth;

pub use error::{Error, Result};
