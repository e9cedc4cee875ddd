pub mod coordinate;
pub mod diagnostics;
pub mod emitter;
pub mod funcprobe;
pub mod interventions;
pub mod error;
pub mod harness;
pub mod numcore;
pub mod params;
pub mod reader;
pub mod rng;
pub mod siren;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/siren.md")]
    mod siren {}
    #[doc = include_str!("../../../book/src/coordinates.md")]
    mod coordinates {}
    #[doc = include_str!("../../../book/src/reader.md")]
    mod reader {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/interventions.md")]
    mod interventions {}
    #[doc = include_str!("../../../book/src/funcprobe.md")]
    mod funcprobe {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
