//! Quantization of neural network parameter sets under a compression-ratio
//! constraint.
//!
//! The crate is organised the way the pipeline runs:
//!
//! - [`store`]: flat parameter vectors, curvature weights and pruning masks,
//!   plus their bit-exact on-disk format.
//! - [`refnet`]: a small multilayer perceptron used to produce realistic
//!   parameters, curvature (Hessian diagonal or Adam moments) and accuracy
//!   numbers.
//! - [`quantizers`]: k-means, Hessian-weighted k-means, uniform quantization
//!   and entropy-constrained scalar quantization (ECSQ) over a shared
//!   [`quantizers::Assignment`] / [`quantizers::Codebook`] representation.
//! - [`coding`]: entropy, Huffman and fixed-length prefix codes, the
//!   `NQ01` bitstream, index-difference coding and compression-ratio
//!   accounting.
//! - [`pipeline`]: the end-to-end prune / quantize / code / fine-tune flow
//!   used by the command-line tool.

pub mod coding;
pub mod error;
pub mod pipeline;
pub mod quantizers;
pub mod refnet;
pub mod store;

pub use error::{Error, Result};
