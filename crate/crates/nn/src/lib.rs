//! Dense f64 tensors with a tape-free reverse-mode autodiff, plus the kernels
//! the BEV networks are assembled from: convolution, linear and normalization
//! layers, windowed self-attention, bilinear grid sampling and modulated
//! deformable convolution.
//!
//! Every differentiable op records its inputs and a backward closure on the
//! output [`Var`]. When no input requires a gradient nothing is recorded, so
//! inference with untracked parameters keeps no intermediate buffers alive.

pub mod attention;
pub mod autograd;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod ops;
pub mod params;
pub mod sample;
pub mod tensor;

mod gemm;

pub use attention::{SwinBlock, WindowAttentionConfig};
pub use autograd::{BackwardCtx, Grads, Var};
pub use error::{NnError, Result};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use params::{ParamStore, Params};
pub use tensor::Tensor;
