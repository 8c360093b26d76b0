//! Tropical convolutional neural networks.
//!
//! Convolution layers that replace multiply-accumulate with add-then-min/max,
//! a standard convolution baseline, a small training engine, dataset loaders
//! and the experiment harness behind the `tcnn` binary.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod network;
pub mod noise;
pub mod ops;
pub mod oracle;
pub mod pnm;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use layers::{ConvKind, ConvParams, TropicalMode};
pub use network::{Architecture, Network};
pub use ops::OpCounter;
pub use tensor::{PadSpec, Shape, Tensor};
