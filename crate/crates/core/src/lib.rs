pub mod analysis;
pub mod attention;
pub mod commands;
pub mod data;
pub mod decoding;
pub mod error;
pub mod layers;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
