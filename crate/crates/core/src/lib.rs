//! Deep mixed effect models with per-series Gaussian processes.
//!
//! Every series (patient) gets its own exact GP. The GP mean is a deep network
//! shared by all series and the kernel is an ARD squared exponential applied to
//! shared deep embeddings of the inputs. Because the joint covariance across
//! series is block diagonal, the cohort marginal likelihood is a plain sum of
//! per-series terms and costs `O(P T^3)`.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. All transcendental functions go through `libm` so results are
//! bit-identical with and without `std`.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose to reject NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod infer;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
pub use infer::{AdaptationConfig, PredictiveDistribution, ThetaInit};
pub use kernel::KernelParams;
pub use linalg::{CholeskyFactor, JitterConfig, SpdMatrix};
pub use model::{DmeGpModel, Likelihood, MeanKind, ModelConfig, PatientParams, PatientSeries, SharingMode};
pub use nn::{Architecture, CellKind, Embedding, NetworkParams};
pub use train::{AdamConfig, OptimizerState, TrainConfig};
