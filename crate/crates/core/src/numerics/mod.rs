//! Dense tensors, forward kernels, reverse-mode differentiation and the
//! finite-difference oracle used to verify it.

pub mod dd;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use dd::DoubleDouble;
pub use gradcheck::{gradcheck, gradcheck_with, GradcheckOptions, GradcheckReport};
pub use ops::{concat_features, dilated_conv1d, dropout, gelu, layer_norm, linear, matmul, softmax_rows};
pub use tape::{MaskSource, Role, Tape, Var};
pub use tensor::{Real, Tensor};
