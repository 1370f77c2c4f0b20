//! niclab: a self-contained neural image compression laboratory.
//!
//! The crate implements a factorized-prior learned image codec end to end —
//! hand-written tensor kernels with reverse-mode differentiation, GDN/IGDN
//! autoencoder, learned entropy model, bit-exact range coder, versioned
//! bitstreams — plus domain adaptation (naive and selective fine-tuning, and
//! adaptation-without-forgetting via frozen shared parameters with added
//! custom filters) and a rate-distortion/forgetting evaluation suite.
//!
//! See the guide in `book/` for concepts and walkthroughs; the `niclab`
//! binary exposes the training, coding, and evaluation pipelines.

pub mod cli;
pub mod coder;
pub mod data;
pub mod digest;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod guide;
pub mod kernels;
pub mod model;
pub mod model_file;
pub mod pipeline;
pub mod tape;
pub mod train;
pub mod tensor;

pub use coder::{rc_decode, rc_encode, SymbolGrid};
pub use entropy::{freeze_tables, FactorizedDensity, PmfTable};
pub use error::{Error, Result};
pub use model::{CodecConfig, CodecModel};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
