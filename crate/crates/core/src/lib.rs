//! Near-field beam prediction toolkit: channel simulation, widebeam pilot
//! sounding, exhaustive oracle labeling and a CNN plus decoder-transformer
//! predictor trained from scratch.

pub mod binio;
pub mod channel;
pub mod codebook;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod selfcheck;
pub mod sounding;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/channel.md")]
    mod channel {}
    #[doc = include_str!("../../../book/src/sounding.md")]
    mod sounding {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
