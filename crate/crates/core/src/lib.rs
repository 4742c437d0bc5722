//! Selective calibration toolkit.
//!
//! A selector scores each input and abstains on the rest so that the
//! predictions it keeps are well calibrated. The crate covers synthetic
//! data with controlled shifts, a base classifier, kernel and binned
//! calibration statistics, meta-feature extraction, the selector network,
//! the kernel-based selection loss, a worst-case perturbation trainer and an
//! evaluation harness.
//!
//! Numeric cores (kernel statistics, calibration metrics, the selector and
//! the loss) are generic over [`Scalar`]; the aliases below fix them to
//! `f64`, which is what the rest of the crate uses.

pub mod basemodel;
pub mod calmetrics;
pub mod cli;
pub mod error;
pub mod eval_harness;
pub mod kernelstats;
pub mod metafeatures;
pub mod robust_trainer;
pub mod nn;
pub mod scalar;
pub mod selector;
pub mod smmce_loss;
pub mod synthdata;
pub mod textfmt;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type KernelSpec = kernelstats::KernelSpec<f64>;
pub type ScoredBatch = kernelstats::ScoredBatch<f64>;
pub type SoftSelector = selector::SoftSelector<f64>;
pub type HardSelector = selector::HardSelector<f64>;
pub type LossConfig = smmce_loss::LossConfig<f64>;
pub type Predictions = calmetrics::Predictions<f64>;
pub type Mlp = nn::Mlp<f64>;
