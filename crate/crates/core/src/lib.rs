//! Joint training of a multi-label lesion classifier and a multi-class body
//! location classifier over one shared convolutional trunk.
//!
//! The crate is self-contained: [`tensor`] provides a small reverse-mode
//! autodiff engine, [`network`] the dual-head residual CNN, [`objective`] and
//! [`optimizer`] the training math, [`data`] datasets and augmentation,
//! [`eval`] the ranking metrics and cross-validation harness, and
//! [`analysis`] feature retrieval and class activation maps.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod objective;
pub mod optimizer;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
