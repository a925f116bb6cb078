pub mod backbone;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod heads;
pub mod io;
pub mod inference;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod sequence;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

// The guide's chapters compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/streams.md")]
    mod streams {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
