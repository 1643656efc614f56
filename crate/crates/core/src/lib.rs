pub mod autodiff;
pub mod channel;
pub mod dbp;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod gradcheck;
pub mod kernels;
pub mod pmd;
pub mod rng;
pub mod signal;
pub mod subband;
pub mod training;

pub use error::{Error, Result};
