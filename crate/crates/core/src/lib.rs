pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod depth_encoder;
pub mod encoders;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod lang;
pub mod nn;
pub mod policy;
pub mod roi;
pub mod seed;
pub mod sim;
