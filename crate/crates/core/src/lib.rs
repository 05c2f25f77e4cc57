pub mod autograd;
pub mod cam;
pub mod config;
pub mod data;
pub mod deform;
pub mod error;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
