pub mod augment;
pub mod autograd;
pub mod data;
pub mod ftt;
pub mod gradcheck;
pub mod mbblock;
pub mod model;
pub mod nn;
pub mod error;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autograd::{BnIds, Gradients, ParamId, ParamRole, ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use ops::{Activation, BatchNormParams, ConvWeights, Mode};
pub use tensor::{Float, Shape, Tensor};
