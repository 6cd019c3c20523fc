//! Attribute-based distortion identification and blind image quality
//! regression.

pub mod attribute_model;
pub mod datagen;
pub mod diffcore;
pub mod digest;
pub mod encoder;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod regressor;
pub mod saliency;

pub use error::{Error, ErrorClass, Result};
