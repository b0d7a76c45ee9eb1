pub mod error;
pub mod decomp;
pub mod domain;
pub mod exterior;
pub mod fft;
pub mod grid;
pub mod hardy;
pub mod io;
pub mod kernel;
pub mod lp;
pub mod potential;
pub mod tent;

pub use error::{Error, Result};
pub use exterior::{multi_indices, MultiIndex, Multivector};
pub use grid::{ConvMode, FormField, GridSpec, KernelLattice};
