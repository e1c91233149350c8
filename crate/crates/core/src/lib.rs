pub mod daereduce;
pub mod densenet;
pub mod diffops;
pub mod elastic;
pub mod error;
pub mod mcx;
pub mod neucubature;
pub mod par;
pub mod posegen;
pub mod rdsim;

pub use error::{Error, Result};
pub use mcx::{MultiComplex, Scalar};
