//! Counterfactual chi-squared GAN.
//!
//! Learns a generator distribution that minimizes the summed Pearson
//! chi-squared divergence to two or more observational study arms, then
//! reads per-unit importance weights off the trained critics. The weights
//! support low-variance average-treatment-effect estimation, effective
//! sample size diagnostics, and covariate balance checks.
//!
//! Module map:
//! - [`tensor`] / [`tape`]: dense f64 tensors with reverse-mode autodiff
//! - [`nets`]: generator and critic networks, output transform, init
//! - [`trainer`]: alternating adversarial optimization
//! - [`weights`]: importance-weight extraction, normalization, SIR
//! - [`estimators`]: weighted ATE, Kish ESS, ASDM, chi-squared diagnostics
//! - [`simgen`]: normal-Wishart synthetic cohorts
//! - [`baselines`]: logistic propensity scores, IPW, clipped IPW
//! - [`io`]: cohort/weights/trace CSVs and the model checkpoint

pub mod baselines;
pub mod data;
pub mod error;
pub mod estimators;
pub mod io;
pub mod nets;
pub mod oracle;
pub mod simgen;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use data::StudyArm;
pub use error::{Error, Result};
pub use nets::{Discriminator, Generator, StandardizationStats};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainedModel};
pub use weights::WeightVector;
