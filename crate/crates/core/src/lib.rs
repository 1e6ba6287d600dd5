//! Spectral representation learning for conditional moment models.
//!
//! The crate implements the full pipeline for kernelized minimax estimation
//! with learned kernels:
//!
//! - [`linalg`]: dense symmetric eigendecomposition, fractional matrix powers
//!   and PSD projection used by kernel construction and the analytic oracles.
//! - [`nnet`]: a small feedforward network stack (Swish MLPs, inverted
//!   dropout, exact backprop, AdamW) that parameterizes the feature maps.
//! - [`contrastive`]: the density-ratio objective, its U-statistic estimate,
//!   minibatch gradients and the spectral trainer.
//! - [`kernels`]: learned kernels built from feature covariances, RBF
//!   baselines, product kernels for overlap variables and Gram assembly.
//! - [`cmm`]: the closed-form saddle solution of the regularized minimax
//!   conditional-moment estimator, prediction, held-out violation scoring and
//!   hyperparameter selection.
//! - [`oracles`]: analytic conditional-expectation operators (Gaussian pair,
//!   torus convolution, finite discrete) with exact singular systems, density
//!   ratios, ill-posedness measures and moduli of continuity.
//! - [`datagen`]: seeded synthetic data generators for the decoded NPIV and
//!   proxy-control processes, with named splits and on-disk persistence.

pub mod cmm;
pub mod contrastive;
pub mod datagen;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod nnet;
pub mod oracles;
pub mod rng;

pub use cmm::{CmmFit, HparamGrid};
pub use contrastive::{SpectralModel, TrainConfig};
pub use datagen::Dataset;
pub use error::{Error, Result};
pub use kernels::{Kernel, LearnedKernel, RbfKernel};
pub use linalg::{EigenDecomp, SymMatrix};
pub use nnet::{FeatureNet, OptimizerState};
pub use oracles::{HypothesisSpec, OperatorOracle};
