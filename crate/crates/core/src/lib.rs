//! Hyperbolic product quantization.
//!
//! Feature vectors are projected onto a product of Lorentz manifolds, quantized
//! against per-subspace hyperbolic codebooks, and searched through query-specific
//! lookup tables. Training combines a quantized contrastive objective with
//! prototype-wise and instance-wise losses over an epoch-wise cluster hierarchy.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases at the
//! crate root fix it to `f64`, which is what the training and file formats use.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod hierarchy;
pub mod index;
pub mod io;
pub mod model;
pub mod objective;
pub mod quantizer;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ManifoldPoint = geometry::ManifoldPoint<f64>;
pub type TangentVector = geometry::TangentVector<f64>;
pub type ProductPoint = geometry::ProductPoint<f64>;
pub type SubCodebook = quantizer::SubCodebook<f64>;
pub type Codebook = quantizer::Codebook<f64>;
pub use quantizer::QuantCode;
pub type Model = model::Model<f64>;
pub type LookupTable = index::LookupTable<f64>;
