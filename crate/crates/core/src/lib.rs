//! Referring video segmentation with an interleaved vision-language encoder
//! and language-guided multi-scale dynamic filtering, on a small
//! self-contained differentiable tensor core.

pub mod autodiff;
pub mod backbone;
pub mod check;
pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod image;
pub mod language;
pub mod lmdf;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod transformer;
pub mod vlmg;

pub use error::{Error, Result};
