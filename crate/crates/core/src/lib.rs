pub mod agc;
pub mod bimamba;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod params;
pub mod ssm;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use model::{Hyper, MacReport, SambaModel, SambaParams};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Activation, Tensor, TensorError};
