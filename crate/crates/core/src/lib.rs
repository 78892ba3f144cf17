//! Numerical laboratory for offline preference optimization on softmax
//! multi-armed bandits.
//!
//! The crate provides the pieces needed to study reward hacking in
//! preference-optimization methods at desk scale:
//!
//! - [`bandit`]: bandit instances, softmax policies, the Bradley-Terry
//!   preference model, and seeded dataset sampling.
//! - [`wer`]: weighted entropy and the exact solver for weighted-entropy
//!   regularized reward maximization.
//! - [`objectives`]: losses and analytic gradients for fifteen preference
//!   optimization methods, plus stationary/dynamic label updates.
//! - [`trainer`]: full-batch projected gradient descent over the `[0,1]`
//!   parameter box with oracle masks and dynamic labels.
//! - [`hard_instances`]: the three-armed constructions where standard
//!   methods provably fail, with forced-event datasets and Monte-Carlo
//!   reproduction harnesses.
//! - [`dynamics`]: the coupled parameter-gap/label ODE system and its
//!   coverage-dependent bound checks.
//! - [`oracle`]: independent brute-force verifiers (grid search, finite
//!   differences, concentrability on reward grids).
//!
//! Everything is deterministic given seeds: experiment trials derive
//! independent ChaCha streams from a master seed and a trial index, so runs
//! parallelize without losing reproducibility.

pub mod bandit;
pub mod dynamics;
pub mod hard_instances;
pub mod objectives;
pub mod oracle;
pub mod trainer;
pub mod wer;

pub use bandit::{
    BanditError, BanditInstance, EmpiricalStats, PreferenceDataset, PreferenceSample,
    SoftmaxPolicy,
};
pub use dynamics::{DynamicsConfig, DynamicsError, DynamicsTrajectory, Theorem3Verdict};
pub use hard_instances::{
    ExperimentReport, HardInstanceError, HardInstanceBundle, Proposition, TrialRow,
};
pub use objectives::{LossContext, Method, MethodSpec, MuEstimate, ObjectiveError};
pub use oracle::{ConcentrabilityBound, OracleError};
pub use trainer::{TrainConfig, TrainError, TrainResult};
pub use wer::{WeightScheme, WerError};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Numerically stable `log(sigmoid(x))`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// The logistic sigmoid `1 / (1 + exp(-x))`.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// RNG for stream `stream` of the generator seeded with `seed`.
///
/// Streams are statistically independent, so a master seed plus a trial
/// index yields reproducible parallel experiments regardless of scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
