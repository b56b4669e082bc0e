pub mod autodiff;
pub mod corpus;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fsq;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod stream;
pub mod train;
pub mod unitdec;

pub use error::{Error, Result};
