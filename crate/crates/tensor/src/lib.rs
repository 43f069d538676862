//! Dense tensors, a reverse-mode tape, and the convolutional-network
//! primitives built on it: convolution, batch normalization, ReLU,
//! elementwise addition, pooling, linear layers and softmax cross-entropy.

pub mod bn;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use bn::{BnMode, BnState};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::Sgd;
pub use param::{ParamId, ParamRole, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
