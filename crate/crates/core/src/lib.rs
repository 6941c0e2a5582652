//! Bottleneck-Transformer slice-ensemble classifier kit.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors, a reverse-mode autodiff tape, and a
//!   finite-difference gradient checker.
//! * [`attention`]: global 2D multi-head self-attention with learned
//!   relative position encodings.
//! * [`model`]: residual bottleneck and BoT blocks assembled into BoTNet-50,
//!   plus checkpoint persistence.
//! * [`optim`]: Adam and the two-pass sharpness-aware wrapper.
//! * [`data`]: volumes, central-slice extraction, normalization,
//!   augmentation, subject-level splits, synthetic volumes.
//! * [`ensemble`]: slice-model training, ensemble voting, metrics and ROC.
//! * [`verify`]: the self-check battery behind `botkit verify`.

pub mod error;
pub mod faults;
pub mod attention;
pub mod data;
pub mod ensemble;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
