pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod profiler;
pub mod stylization;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

/// The guide's snippets, compiled and run as doc-tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/stylization.md")]
    mod stylization {}
    #[doc = include_str!("../../../book/src/mean-teacher.md")]
    mod mean_teacher {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/profiling.md")]
    mod profiling {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
