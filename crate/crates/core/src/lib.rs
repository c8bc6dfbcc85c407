pub mod backbone;
pub mod bbox;
pub mod bench;
pub mod cfam;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod formats;
pub mod head;
pub mod linker;
pub mod inference;
pub mod inspect;
pub mod lfb;
pub mod loss;
pub mod metrics;
pub mod postprocess;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use bbox::BBox;
pub use error::{Error, Result};
pub use tensor::{no_grad, Real, Tensor};
