pub mod blocks;
pub mod data;
pub mod error;
pub mod kv;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{GraNet, GraNetConfig, GraNetWeights};
pub use tensor::{Graph, Tensor, Var};
