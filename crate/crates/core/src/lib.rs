//! Spectral band decomposition, spectral-energy routing and operator experts
//! for 2D field inversion, with an executable harness for the HL-ratio
//! bounds and a small reverse-mode training stack.

pub mod autodiff;
pub mod bands;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experts;
pub mod fft;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod preference;
pub mod resample;
pub mod router;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Field2D, LatentTensor, Spectrum2D, Tensor};
