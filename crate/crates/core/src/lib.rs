//! Concept bottleneck models with layer-wise relevance propagation and
//! gradient-based attribution, plus the evaluation kit around them.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`] and [`nn`]: dense `f64` tensors and a small layer set with a
//!   traced forward pass.
//! - [`autodiff`]: reverse-mode gradients and a finite-difference oracle.
//! - [`lrp`]: LRP-0, LRP-ε and LRP-αβ with per-layer conservation accounting.
//! - [`attribution`]: gradient, integrated gradients, LRP and SmoothGrad maps.
//! - [`cbm`]: the `x → c → y` model, its training regimes and interventions.
//! - [`evalkit`]: pointing game and concept contribution reports.
//! - [`synth`] and [`io`]: synthetic data with keypoints, file formats, CSV.

pub mod attribution;
pub mod autodiff;
pub mod cbm;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod lrp;
pub mod nn;
pub mod par;
pub mod render;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
