//! Class-conditional GAN training for imbalanced image datasets: balanced
//! fake-label sampling, gradient-penalty critics and autoencoder
//! initialization with a supervised label embedding.

pub mod autoencoder;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
