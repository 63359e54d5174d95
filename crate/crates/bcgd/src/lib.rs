//! Full quantization of neural networks by blended coarse gradient descent.
//!
//! The crate has two halves. The training half quantizes activations with a
//! staircase function whose backward pass uses substitute derivatives,
//! projects weights onto low-bit sets, and updates the float shadow weights
//! by a blend of BinaryConnect and projected gradient descent. The analysis
//! half is a two-layer Gaussian lab whose closed-form population
//! quantities are all verified against Monte Carlo and finite-difference
//! oracles.

pub mod act;
pub mod data;
pub mod descent;
pub mod lab;
pub mod matrix;
pub mod net;
pub mod optim;
pub mod rng;
pub mod train;
pub mod weights;

pub use act::{ActQuantizer, AlphaVariant};
pub use matrix::Matrix;
pub use net::{ActFn, CoarseGrads, Labels, LinearLayer, LossKind, QuantNet};
pub use optim::{BlendedState, Method, OptimParams};
pub use weights::QuantizedWeights;
