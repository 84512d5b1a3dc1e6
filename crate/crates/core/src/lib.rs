//! Self-supervised representation learning with a one-negative
//! triplet+cross-entropy objective and random PSD similarity maps.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases below fix the precision for callers that do not need to choose.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod losses;
pub mod rngmap;
pub mod scalar;
pub mod seed;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type RandomMap32 = rngmap::RandomMap<f32>;
pub type RandomMap64 = rngmap::RandomMap<f64>;
