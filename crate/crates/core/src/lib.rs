//! Structured low-rank (SLR) and unrolled Deep-SLR reconstruction of
//! undersampled single- and multi-channel MRI.

pub mod acquisition;
pub mod analysis;
pub mod cg;
pub mod error;
pub mod io;
pub mod lifting;
pub mod rng;
pub mod slr;
pub mod tensor;
pub mod unrolled;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{ComplexTensor, C64};
