//! Data-free post-training quantization with power-function quantizers.
//!
//! The exponent `a` of the quantizer `w ↦ sign(w)·|w|^a` is fitted by
//! minimizing the summed weight reconstruction error; the fitted model is
//! then executed with simulated quantized arithmetic.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod fit;
pub mod inference;
pub mod intpow;
pub mod io;
pub mod model;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
