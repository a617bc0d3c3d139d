pub mod autograd;
pub mod dsp;
pub mod error;
pub mod formats;
pub mod latent;
pub mod model;
pub mod pqmf;
pub mod runtime;
pub mod train;

pub use error::{Error, Result};
