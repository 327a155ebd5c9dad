//! Exact tabular laboratory for pairwise preference optimization.
//!
//! Policies are softmax tables over a finite set of contexts and atomic
//! responses, so every objective, gradient and expectation can be computed
//! by enumeration and checked against independent oracles.

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod dataset;
pub mod env;
pub mod error;
pub mod losses;
pub mod math;
pub mod parallel;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod table;
pub mod trainer;
pub mod verify;

pub use dataset::{Counted, PairSample, PreferenceSample, Weighted};
pub use env::{GroundTruth, PairWeight, PreferenceEnv};
pub use error::{LabError, Result};
pub use losses::{LossKind, LossReport, LossTerms};
pub use policy::{kl_divergence, TabularPolicy};
pub use reward::RewardTable;
pub use table::{GradientTable, Table};
pub use trainer::{Method, MetricsRecord, Monitor, TrainConfig, TrainOutcome, TrainingData};
