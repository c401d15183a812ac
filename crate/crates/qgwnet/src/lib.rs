//! Quantile Graph WaveNet: spatio-temporal forecasting on sensor graphs with
//! quantile-conditioned uncertainty estimates.
//!
//! The model is a stack of gated dilated causal convolutions interleaved with
//! graph diffusion convolutions. Instead of predicting a mean, the network is
//! conditioned on a quantile level `τ` and trained with a Huber quantile loss,
//! so a single forward pass yields the `τ`-quantile of the predictive
//! distribution. Asymmetric and skewed intervals fall out naturally; no
//! sampling is needed at inference time.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff engine
//! over dense `f64` tensors ([`autodiff`]), sparse graph transition matrices
//! and diffusion convolution ([`graph`]), the forecaster itself ([`model`]),
//! an Adam training loop ([`train`]), post-hoc quantile recalibration
//! ([`calibrate`]), evaluation metrics and reference baselines ([`evaluate`]),
//! and a grid-to-graph data pipeline ([`data`]).
//!
//! ```
//! use qgwnet::losses::pinball;
//!
//! // The pinball loss is asymmetric: at τ=0.9 underestimation costs 9x more
//! // than overestimation, so its expected minimizer is the 0.9-quantile.
//! assert_eq!(pinball(1.0, 0.9), 0.9);
//! assert!((pinball(-1.0, 0.9) - 0.1).abs() < 1e-15);
//! ```
//!
//! The `qgw` binary wires the pipeline end to end; see the book under `book/`
//! for a guided tour.

pub mod autodiff;
pub mod calibrate;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod losses;
pub mod model;
pub mod synthetic;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
