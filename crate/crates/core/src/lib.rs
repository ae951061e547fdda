// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod kmeans;
pub mod matrix;
pub mod nn;
pub mod pflbed;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/basis-models.md")]
    mod basis_models {}
    #[doc = include_str!("../../../book/src/federated-training.md")]
    mod federated_training {}
    #[doc = include_str!("../../../book/src/collapse.md")]
    mod collapse {}
    #[doc = include_str!("../../../book/src/personalization.md")]
    mod personalization {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
    #[doc = include_str!("../../../book/src/testing.md")]
    mod testing {}
}
