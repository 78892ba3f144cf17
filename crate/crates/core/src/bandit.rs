//! Multi-armed bandit instances, softmax policies, the Bradley-Terry
//! preference model, and seeded preference-dataset sampling.
//!
//! Everything here is a plain immutable value: instances and policies are
//! validated on construction and all operations are pure given the seed, so
//! concurrent evaluation needs no synchronization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{sigmoid, stream_rng};

/// Errors from constructing or querying bandit values.
#[derive(Debug, thiserror::Error)]
pub enum BanditError {
    #[error("instance needs at least two arms, got {0}")]
    TooFewArms(usize),
    #[error("true reward {value} of arm {arm} is outside [0, 1]")]
    RewardOutOfRange { arm: usize, value: f64 },
    #[error("length of arm {0} must be at least 1")]
    ZeroLength(usize),
    #[error("pair distribution entry ({0}, {1}) is not a valid arm pair")]
    BadPair(usize, usize),
    #[error("pair distribution weight for ({0}, {1}) is negative")]
    NegativePairWeight(usize, usize),
    #[error("pair distribution sums to {0}, expected 1 within 1e-12")]
    PairDistNotNormalized(f64),
    #[error("parameter {value} of arm {arm} is outside the [0, 1] box")]
    ParamOutOfBox { arm: usize, value: f64 },
    #[error("expected {expected} arms, got {got}")]
    ArmCountMismatch { expected: usize, got: usize },
    #[error("arms of a comparison must be distinct, got arm {0} twice")]
    IdenticalArms(usize),
    #[error("arm index {0} out of range for {1} arms")]
    ArmOutOfRange(usize, usize),
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// A multi-armed bandit with bounded true rewards, per-arm response lengths,
/// and a comparison distribution over unordered arm pairs.
///
/// The context distribution is a point mass, so prompts do not appear
/// anywhere: an instance is fully described by `(r*, |y|, mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditInstance {
    true_rewards: Vec<f64>,
    lengths: Vec<u32>,
    /// Unordered pairs stored as `(lo, hi)` with their comparison probability.
    pair_dist: Vec<((usize, usize), f64)>,
}

impl BanditInstance {
    /// Build and validate an instance. Pair entries are canonicalized to
    /// `(lo, hi)` order and merged if duplicated.
    pub fn new(
        true_rewards: Vec<f64>,
        lengths: Vec<u32>,
        pair_dist: Vec<((usize, usize), f64)>,
    ) -> Result<Self, BanditError> {
        let k = true_rewards.len();
        if k < 2 {
            return Err(BanditError::TooFewArms(k));
        }
        if lengths.len() != k {
            return Err(BanditError::ArmCountMismatch {
                expected: k,
                got: lengths.len(),
            });
        }
        for (arm, &value) in true_rewards.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(BanditError::RewardOutOfRange { arm, value });
            }
        }
        for (arm, &len) in lengths.iter().enumerate() {
            if len == 0 {
                return Err(BanditError::ZeroLength(arm));
            }
        }
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for ((i, j), w) in pair_dist {
            if i == j || i >= k || j >= k {
                return Err(BanditError::BadPair(i, j));
            }
            if w < 0.0 {
                return Err(BanditError::NegativePairWeight(i, j));
            }
            *merged.entry((i.min(j), i.max(j))).or_insert(0.0) += w;
        }
        let total: f64 = merged.values().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(BanditError::PairDistNotNormalized(total));
        }
        Ok(Self {
            true_rewards,
            lengths,
            pair_dist: merged.into_iter().collect(),
        })
    }

    pub fn arm_count(&self) -> usize {
        self.true_rewards.len()
    }

    pub fn true_rewards(&self) -> &[f64] {
        &self.true_rewards
    }

    pub fn lengths(&self) -> &[u32] {
        &self.lengths
    }

    /// Comparison distribution over unordered pairs, in `(lo, hi)` order.
    pub fn pair_dist(&self) -> &[((usize, usize), f64)] {
        &self.pair_dist
    }

    /// Expected true reward of a policy.
    pub fn performance(&self, policy: &SoftmaxPolicy) -> Result<f64, BanditError> {
        if policy.arm_count() != self.arm_count() {
            return Err(BanditError::ArmCountMismatch {
                expected: self.arm_count(),
                got: policy.arm_count(),
            });
        }
        Ok(policy
            .probs()
            .iter()
            .zip(&self.true_rewards)
            .map(|(p, r)| p * r)
            .sum())
    }

    /// Bradley-Terry probability that `winner` is preferred over `loser`,
    /// `sigma(r*(winner) - r*(loser))`.
    pub fn bt_prob(&self, winner: usize, loser: usize) -> Result<f64, BanditError> {
        let k = self.arm_count();
        if winner >= k {
            return Err(BanditError::ArmOutOfRange(winner, k));
        }
        if loser >= k {
            return Err(BanditError::ArmOutOfRange(loser, k));
        }
        if winner == loser {
            return Err(BanditError::IdenticalArms(winner));
        }
        Ok(sigmoid(self.true_rewards[winner] - self.true_rewards[loser]))
    }

    /// Draw `n` iid comparisons: a pair from the comparison distribution,
    /// then a label from the Bradley-Terry model. Deterministic given `seed`.
    pub fn sample_dataset(&self, n: usize, seed: u64) -> PreferenceDataset {
        let mut rng = stream_rng(seed, 0);
        self.sample_dataset_with(n, &mut rng)
    }

    /// As [`Self::sample_dataset`] but drawing from a caller-provided stream.
    pub fn sample_dataset_with(&self, n: usize, rng: &mut ChaCha8Rng) -> PreferenceDataset {
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let (lo, hi) = self.draw_pair(rng);
            // Canonical orientation: the lower index plays the y0 slot.
            let p_hi = sigmoid(self.true_rewards[hi] - self.true_rewards[lo]);
            let label = u8::from(rng.gen::<f64>() < p_hi);
            samples.push(PreferenceSample::new(hi, lo, label).expect("valid pair"));
        }
        PreferenceDataset::new(samples)
    }

    fn draw_pair(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &((lo, hi), w) in &self.pair_dist {
            acc += w;
            if u < acc {
                return (lo, hi);
            }
        }
        // Rounding can leave u barely above the accumulated sum.
        self.pair_dist.last().map(|&(p, _)| p).expect("nonempty")
    }
}

/// Softmax policy over arms with parameters constrained to the `[0,1]` box:
/// `pi(y) = exp(theta(y)) / sum_y' exp(theta(y'))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    params: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(params: Vec<f64>) -> Result<Self, BanditError> {
        for (arm, &value) in params.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(BanditError::ParamOutOfBox { arm, value });
            }
        }
        Ok(Self { params })
    }

    /// Uniform policy (all parameters equal).
    pub fn uniform(arm_count: usize) -> Self {
        Self {
            params: vec![0.0; arm_count],
        }
    }

    pub fn arm_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Action probabilities. Positive and summing to one by construction.
    pub fn probs(&self) -> Vec<f64> {
        let z: f64 = self.params.iter().map(|t| t.exp()).sum();
        self.params.iter().map(|t| t.exp() / z).collect()
    }

    /// Log action probabilities `theta(y) - log Z`.
    pub fn log_probs(&self) -> Vec<f64> {
        let log_z = self
            .params
            .iter()
            .map(|t| t.exp())
            .sum::<f64>()
            .ln();
        self.params.iter().map(|t| t - log_z).collect()
    }
}

/// One pairwise comparison in canonical orientation: `arm_b < arm_a`, with
/// `label = 1` meaning `arm_a` was preferred.
///
/// `dyn_label` is the mutable dynamic label in the *winner* orientation
/// (trust in the observed winner); it starts at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceSample {
    pub arm_a: usize,
    pub arm_b: usize,
    pub label: u8,
    pub dyn_label: f64,
}

impl PreferenceSample {
    /// Build a sample, normalizing to the canonical orientation (the lower
    /// arm index takes the `arm_b` slot and the label is flipped with it).
    pub fn new(arm_a: usize, arm_b: usize, label: u8) -> Result<Self, BanditError> {
        if arm_a == arm_b {
            return Err(BanditError::IdenticalArms(arm_a));
        }
        if label > 1 {
            return Err(BanditError::BadLabel(label));
        }
        let (arm_a, arm_b, label) = if arm_b < arm_a {
            (arm_a, arm_b, label)
        } else {
            (arm_b, arm_a, 1 - label)
        };
        Ok(Self {
            arm_a,
            arm_b,
            label,
            dyn_label: 1.0,
        })
    }

    /// Arm preferred in the dataset.
    pub fn chosen(&self) -> usize {
        if self.label == 1 {
            self.arm_a
        } else {
            self.arm_b
        }
    }

    /// Arm rejected in the dataset.
    pub fn rejected(&self) -> usize {
        if self.label == 1 {
            self.arm_b
        } else {
            self.arm_a
        }
    }
}

/// An ordered list of preference samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreferenceDataset {
    samples: Vec<PreferenceSample>,
}

impl PreferenceDataset {
    pub fn new(samples: Vec<PreferenceSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[PreferenceSample] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [PreferenceSample] {
        &mut self.samples
    }

    /// Overwrite every dynamic label (label updates start from this value).
    pub fn reset_dyn_labels(&mut self, value: f64) {
        for s in &mut self.samples {
            s.dyn_label = value;
        }
    }

    /// Empirical pair frequencies and conditional win frequencies.
    pub fn empirical_stats(&self) -> Result<EmpiricalStats, BanditError> {
        if self.samples.is_empty() {
            return Err(BanditError::EmptyDataset);
        }
        let n = self.samples.len() as f64;
        let mut per_pair: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        for s in &self.samples {
            let entry = per_pair.entry((s.arm_b, s.arm_a)).or_insert((0, 0));
            entry.0 += 1;
            entry.1 += usize::from(s.label);
        }
        let pairs = per_pair
            .into_iter()
            .map(|((lo, hi), (count, hi_wins))| {
                let stats = PairStats {
                    pair_prob: count as f64 / n,
                    hi_win_prob: hi_wins as f64 / count as f64,
                };
                ((lo, hi), stats)
            })
            .collect();
        Ok(EmpiricalStats { pairs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    /// Fraction of the dataset comparing this pair.
    pub pair_prob: f64,
    /// Conditional frequency of the higher-index arm winning.
    pub hi_win_prob: f64,
}

/// Empirical comparison statistics of a dataset, keyed by `(lo, hi)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalStats {
    pairs: BTreeMap<(usize, usize), PairStats>,
}

impl EmpiricalStats {
    /// Fraction of samples comparing arms `i` and `j` (0 if never compared).
    pub fn pair_prob(&self, i: usize, j: usize) -> f64 {
        self.pairs
            .get(&(i.min(j), i.max(j)))
            .map_or(0.0, |s| s.pair_prob)
    }

    /// Conditional frequency of `winner` beating `loser`, or `None` if the
    /// pair was never compared. Unobserved pairs are signaled, not defaulted.
    pub fn win_prob(&self, winner: usize, loser: usize) -> Option<f64> {
        let stats = self.pairs.get(&(winner.min(loser), winner.max(loser)))?;
        if winner > loser {
            Some(stats.hi_win_prob)
        } else {
            Some(1.0 - stats.hi_win_prob)
        }
    }

    pub fn observed_pairs(&self) -> impl Iterator<Item = ((usize, usize), PairStats)> + '_ {
        self.pairs.iter().map(|(&k, &v)| (k, v))
    }
}
