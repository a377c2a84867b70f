pub mod compute;
pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod style;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/compute.md")]
    pub mod compute {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    pub mod schedule {}
    #[doc = include_str!("../../../book/src/denoiser.md")]
    pub mod denoiser {}
    #[doc = include_str!("../../../book/src/style.md")]
    pub mod style {}
    #[doc = include_str!("../../../book/src/guidance.md")]
    pub mod guidance {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    pub mod corpus {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
