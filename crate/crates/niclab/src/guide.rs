//! The user guide, attached as rustdoc so that every fenced Rust snippet in
//! `book/src` compiles and runs under `cargo test --doc`. The rendered book
//! lives in `book/` (build it with `mdbook build book`).

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/autoencoder.md")]
pub mod autoencoder {}

#[doc = include_str!("../../../book/src/entropy-models.md")]
pub mod entropy_models {}

#[doc = include_str!("../../../book/src/range-coding.md")]
pub mod range_coding {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/adaptation.md")]
pub mod adaptation {}

#[doc = include_str!("../../../book/src/forgetting.md")]
pub mod forgetting {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli_walkthrough {}
