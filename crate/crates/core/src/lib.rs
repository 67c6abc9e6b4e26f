pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod losses;
pub mod models;
pub mod nn;
pub mod training;
pub mod wavelet;

mod util;

pub use error::{Error, Result};
pub use image::ImageTensor;
