pub mod auth;
pub mod container;
pub mod detector;
pub mod error;
pub mod imaging;
pub mod io_util;
pub mod metrics;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod yolo;

pub use error::{Error, Result};
