pub mod basis;
pub mod diagnostics;
pub mod error;
pub mod fpca;
pub mod grid;
mod linalg;
pub mod longdata;
pub mod mpcmr;
pub mod robust;
pub mod simgen;
mod smooth;
pub mod study;

pub use error::{Error, Result};
pub use smooth::Bandwidth;
