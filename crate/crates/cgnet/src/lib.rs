//! A self-contained CPU engine for context-guided semantic segmentation.
//!
//! The crate implements the full stack needed to train and run a CGNet-style
//! network at desk scale: dense NCHW tensors with a deterministic PRNG
//! ([`tensor`], [`rng`]), forward/backward kernels for every layer primitive
//! ([`ops`]), the context-guided block and network assembly with parameter
//! and FLOP accounting plus bit-exact checkpoints ([`model`]), an ADAM
//! training loop with poly learning-rate schedule, augmentation, and a
//! finite-difference gradient checker ([`train`]), netpbm image I/O and a
//! synthetic segmentation dataset ([`data`]), and confusion-matrix metrics
//! ([`eval`]).
//!
//! Every kernel is deterministic: reductions accumulate in a fixed index
//! order per output element, so results are bitwise identical at any worker
//! thread count. The `parallel` feature (default) enables rayon
//! data-parallelism across output elements; without it the same loops run
//! sequentially.

pub mod data;
pub mod element;
pub mod error;
pub mod eval;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;

pub use element::{Dtype, Element};
pub use error::{Error, Result};
pub use rng::Pcg32;
pub use tensor::Tensor;
