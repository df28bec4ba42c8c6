//! ECG classification toolkit: signal preprocessing and fiducial detection,
//! a 1D MBConv network with squeeze-and-excitation, LSTM autoencoders over
//! R-peak/P-wave sequences, cross-attention fusion of age and gender, and
//! the training and evaluation machinery around them.

pub mod blocks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
