//! Cross-perturbation training for single-source domain generalization.
//!
//! The crate bundles a small tensor engine with reverse-mode gradients,
//! patch-level feature-statistics perturbation (MixPatch) plus DSU and
//! MixStyle baselines, image-level augmentation, a compact CNN, the
//! four-route consistency objective and its optimizer, a synthetic
//! multi-domain benchmark with procedural corruptions, and the
//! statistics-spread analysis.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{GradResult, ParamId, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Scalar, Tensor};
