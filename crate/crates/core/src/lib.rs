//! Style deconfounding causal learning at desk scale.

pub mod autodiff;
pub mod bdcl;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod nets;
pub mod rng;
pub mod scm;
pub mod sgem;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

// The book's code blocks run as doctests through these empty modules.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/causal.md")]
    mod causal {}
    #[doc = include_str!("../../../book/src/experts.md")]
    mod experts {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
