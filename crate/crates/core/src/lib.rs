//! Federated learning with weight-standardized local training and
//! distribution-aware non-uniform quantization of uplink updates.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod danuq;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nncore;
pub mod weightstd;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/weight-standardization.md")]
    mod weight_standardization {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/wire-format.md")]
    mod wire_format {}
    #[doc = include_str!("../../../book/src/federation.md")]
    mod federation {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
