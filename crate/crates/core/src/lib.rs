pub mod analysis;
pub mod error;
pub mod fire;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod nn;
pub mod params;
pub mod rng;
pub mod ssd;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor};
