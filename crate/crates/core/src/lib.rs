//! RGB-thermal single-object tracking with a dual-branch one-stream vision
//! transformer and layer-wise mutual multi-modal prompting.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autograd`], [`gradcheck`]: a small `f64` tensor engine with
//!   reverse-mode differentiation and a finite-difference checker.
//! - [`model`] and [`prompter`]: patch embedding, encoder blocks, the mutual
//!   prompting recursion, fusion, the localization head and training loss.
//! - [`tracking`]: cropping, Kalman-filter correction and the online loop.
//! - [`eval`]: metrics, synthetic sequences, parameter/MAC accounting and
//!   attention export.
//! - [`io`]: config, checkpoint, sequence and results file formats.

pub mod autograd;
pub mod bbox;
pub mod cli;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod model;
pub mod prompter;
pub mod tensor;
pub mod tracking;

pub use autograd::{Activation, Graph, ReduceKind, Var};
pub use bbox::BBox;
pub use error::{Error, Result};
pub use image::{Image, Pair};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
