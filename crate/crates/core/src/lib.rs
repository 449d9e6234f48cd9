//! Inversion of geometrically transformed images into the F/W+ latent space
//! of a style-based generator, plus latent editing on the result.
//!
//! The crate carries its own small tensor and autodiff engine
//! ([`tensor`], [`autograd`]) so the whole pipeline runs on a CPU without
//! external runtimes.

pub mod autograd;
pub mod checkpoint;
pub mod editor;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod image_io;
pub mod inversion;
pub mod latent;
pub mod metrics;
pub mod optim;
pub mod perceptual;
pub mod pipeline;
pub mod pnorm;
pub mod tensor;

pub use error::{Error, Result};
