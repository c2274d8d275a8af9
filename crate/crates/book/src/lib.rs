//! Every Rust listing in the guide under `book/src` runs as a doctest of
//! this crate, one module per chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/feature-files.md")]
pub mod feature_files {}
#[doc = include_str!("../../../book/src/density.md")]
pub mod density {}
#[doc = include_str!("../../../book/src/bandwidth.md")]
pub mod bandwidth {}
#[doc = include_str!("../../../book/src/fusion.md")]
pub mod fusion {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
