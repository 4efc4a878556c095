//! Radiance-field reconstruction from posed images and appearance-randomized
//! dataset synthesis.

pub mod error;
pub mod augment;
pub mod field;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod io;
pub mod renderer;
pub mod training;

pub use error::{Error, Result};
