//! The guide under `book/`, compiled as documentation so that every code
//! block in it runs under `cargo test`.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/video_encoder.md")]
pub mod video_encoder {}

#[doc = include_str!("../../../book/src/video_summary.md")]
pub mod video_summary {}

#[doc = include_str!("../../../book/src/text_summary.md")]
pub mod text_summary {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
