//! Wavelet-compressed integral operators and the multiresolution networks
//! built from them.
//!
//! The crate provides, end to end:
//!
//! * periodic Daubechies multiresolution transforms (`wavelet`),
//! * the nonstandard-form compression of a dense operator matrix and its
//!   O(N) banded matrix-vector product (`nsform`),
//! * the layer primitives (periodic convolution, locally connected, dense)
//!   that realize that product as a linear network, plus the nonlinear
//!   BCR-style generalization (`layers`, `bcrnet`),
//! * reverse-mode gradients, Nadam, and a small deterministic training
//!   loop (`grad`),
//! * task generators and ground-truth oracles for operator-learning
//!   experiments (`apps`),
//! * bit-exact binary persistence for tensors, datasets, operators, and
//!   model checkpoints (`persist`).

pub mod apps;
pub mod bcrnet;
pub mod grad;
pub mod layers;
pub mod nsform;
pub mod persist;
pub mod rng;
pub mod wavelet;
