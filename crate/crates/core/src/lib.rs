pub mod ablation;
pub mod autodiff;
pub mod crace;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod map;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use map::Map;
pub use tensor::Tensor;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/layers.md")]
    mod layers {}
    #[doc = include_str!("../../../book/src/crace.md")]
    mod crace {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
