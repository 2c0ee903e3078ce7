pub mod error;
pub mod experiments;
pub mod featurestore;
pub mod fusion;
pub mod heads;
pub mod layers;
pub mod model;
pub mod ndgrad;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;

/// The guide's chapters, compiled so that their snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
