//! Weighted entropy and the exact solver for weighted-entropy regularized
//! reward maximization.
//!
//! The maximizer of `sum_y pi(y) [r(y) - beta w(y) log pi(y)]` over the
//! simplex satisfies the stationarity condition
//! `r(y) = beta w(y) log pi(y) + beta w(y) + lambda` for a shared multiplier
//! `lambda`. The simplex-sum as a function of `lambda` is strictly
//! decreasing, so `lambda` is found by bisection.

use crate::bandit::BanditInstance;

/// Errors from the weighted-entropy solver.
#[derive(Debug, thiserror::Error)]
pub enum WerError {
    #[error("explicit weight {value} of arm {arm} must be positive")]
    NonPositiveWeight { arm: usize, value: f64 },
    #[error("explicit weights cover {got} arms, instance has {expected}")]
    WeightCountMismatch { expected: usize, got: usize },
    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error(
        "bisection failed to bracket the multiplier: f({lo}) = {f_lo}, f({hi}) = {f_hi}"
    )]
    BracketFailure { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
}

/// Per-arm entropy weights `w(y)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum WeightScheme {
    /// `w(y) = 1` (Shannon entropy).
    #[default]
    ConstantOne,
    /// `w(y) = 1 / |y|` with `|y|` the response length of the arm.
    InverseLength,
    /// Arbitrary positive weights, one per arm.
    Explicit(Vec<f64>),
}

impl WeightScheme {
    /// Resolve to one positive weight per arm of `instance`.
    pub fn resolve(&self, instance: &BanditInstance) -> Result<Vec<f64>, WerError> {
        self.resolve_for_lengths(instance.lengths())
    }

    pub fn resolve_for_lengths(&self, lengths: &[u32]) -> Result<Vec<f64>, WerError> {
        match self {
            WeightScheme::ConstantOne => Ok(vec![1.0; lengths.len()]),
            WeightScheme::InverseLength => {
                Ok(lengths.iter().map(|&l| 1.0 / f64::from(l)).collect())
            }
            WeightScheme::Explicit(w) => {
                if w.len() != lengths.len() {
                    return Err(WerError::WeightCountMismatch {
                        expected: lengths.len(),
                        got: w.len(),
                    });
                }
                for (arm, &value) in w.iter().enumerate() {
                    if !(value > 0.0) || !value.is_finite() {
                        return Err(WerError::NonPositiveWeight { arm, value });
                    }
                }
                Ok(w.clone())
            }
        }
    }
}

/// Weighted entropy `-sum_y w(y) p(y) log p(y)`, with `0 log 0 := 0`.
pub fn weighted_entropy(
    p: &[f64],
    w: &WeightScheme,
    instance: &BanditInstance,
) -> Result<f64, WerError> {
    let weights = w.resolve(instance)?;
    Ok(weighted_entropy_resolved(p, &weights))
}

/// As [`weighted_entropy`] with weights already resolved.
pub fn weighted_entropy_resolved(p: &[f64], weights: &[f64]) -> f64 {
    p.iter()
        .zip(weights)
        .map(|(&pi, &wi)| if pi > 0.0 { -wi * pi * pi.ln() } else { 0.0 })
        .sum()
}

/// Exact maximizer of `sum_y pi(y) [r(y) - beta w(y) log pi(y)]` over the
/// simplex, returned as action probabilities.
///
/// Bisects the stationarity multiplier on a bracket expanded geometrically
/// from `[min r - beta w_max (1 + log K) - 1, max r]` until the simplex sum
/// crosses one, then normalizes the residual mass error away.
pub fn solve_wer_policy(
    rewards: &[f64],
    w: &WeightScheme,
    beta: f64,
    instance: &BanditInstance,
) -> Result<Vec<f64>, WerError> {
    if !(beta > 0.0) {
        return Err(WerError::NonPositiveBeta(beta));
    }
    let weights = w.resolve(instance)?;
    assert_eq!(rewards.len(), weights.len(), "one reward per arm");
    let k = rewards.len() as f64;

    // pi(y; lambda) = exp((r(y) - lambda) / (beta w(y)) - 1); the simplex
    // sum is strictly decreasing in lambda.
    let mass = |lambda: f64| -> f64 {
        rewards
            .iter()
            .zip(&weights)
            .map(|(&r, &wi)| ((r - lambda) / (beta * wi) - 1.0).exp())
            .sum()
    };

    let w_max = weights.iter().cloned().fold(f64::MIN, f64::max);
    let r_min = rewards.iter().cloned().fold(f64::MAX, f64::min);
    let r_max = rewards.iter().cloned().fold(f64::MIN, f64::max);
    let mut lo = r_min - beta * w_max * (1.0 + k.ln()) - 1.0;
    let mut hi = r_max;

    // Expand until mass(lo) >= 1 >= mass(hi).
    let mut span = (hi - lo).max(1.0);
    for _ in 0..200 {
        if mass(lo) >= 1.0 {
            break;
        }
        lo -= span;
        span *= 2.0;
    }
    span = (hi - lo).max(1.0);
    for _ in 0..200 {
        if mass(hi) <= 1.0 {
            break;
        }
        hi += span;
        span *= 2.0;
    }
    let (f_lo, f_hi) = (mass(lo), mass(hi));
    if f_lo < 1.0 || f_hi > 1.0 {
        return Err(WerError::BracketFailure { lo, hi, f_lo, f_hi });
    }

    let mut lambda = 0.5 * (lo + hi);
    for _ in 0..200 {
        lambda = 0.5 * (lo + hi);
        let m = mass(lambda);
        if (m - 1.0).abs() <= 1e-13 {
            break;
        }
        if m > 1.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
    }

    let mut p: Vec<f64> = rewards
        .iter()
        .zip(&weights)
        .map(|(&r, &wi)| ((r - lambda) / (beta * wi) - 1.0).exp())
        .collect();
    let total: f64 = p.iter().sum();
    for pi in &mut p {
        *pi /= total;
    }
    Ok(p)
}

/// Largest residual of the reward-gap identity
/// `r(y) - r(y') = beta (w(y) log pi(y) - w(y') log pi(y') + w(y) - w(y'))`
/// over all arm pairs. Zero for the exact maximizer.
pub fn reward_gap_residual(rewards: &[f64], p: &[f64], weights: &[f64], beta: f64) -> f64 {
    let k = rewards.len();
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let lhs = rewards[i] - rewards[j];
            let rhs = beta
                * (weights[i] * p[i].ln() - weights[j] * p[j].ln() + weights[i] - weights[j]);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::BanditInstance;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn instance_with_lengths(lengths: Vec<u32>) -> BanditInstance {
        let k = lengths.len();
        let rewards = vec![0.5; k];
        BanditInstance::new(rewards, lengths, vec![((0, 1), 1.0)]).unwrap()
    }

    fn random_simplex(rng: &mut impl Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().ln()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    }

    #[test]
    fn uniform_distribution_has_log_k_entropy() {
        let inst = instance_with_lengths(vec![1, 1, 1]);
        let h = weighted_entropy(&[1.0 / 3.0; 3], &WeightScheme::ConstantOne, &inst).unwrap();
        assert_abs_diff_eq!(h, 3.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(h, 1.0986, epsilon = 1e-4);
    }

    #[test]
    fn point_mass_has_zero_entropy() {
        let inst = instance_with_lengths(vec![3, 7, 2]);
        let h = weighted_entropy(&[0.0, 1.0, 0.0], &WeightScheme::InverseLength, &inst).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn inverse_length_entropy_respects_vocab_bound() {
        // Arms arranged so that at most |V|^z arms have length z; the
        // weighted entropy with w = 1/|y| is then bounded by
        // log |V| + log L for every distribution.
        let vocab = 2.0f64;
        let lengths: Vec<u32> = std::iter::repeat(1)
            .take(2)
            .chain(std::iter::repeat(2).take(4))
            .chain(std::iter::repeat(3).take(8))
            .chain(std::iter::repeat(4).take(16))
            .collect();
        let max_len = 4.0f64;
        let weights = WeightScheme::InverseLength
            .resolve_for_lengths(&lengths)
            .unwrap();
        let bound = vocab.ln() + max_len.ln();
        let mut rng = crate::stream_rng(31, 0);
        for _ in 0..10_000 {
            let p = random_simplex(&mut rng, lengths.len());
            let h = weighted_entropy_resolved(&p, &weights);
            assert!(h >= 0.0);
            assert!(h <= bound + 1e-12, "H_w = {h} exceeds {bound}");
        }
    }

    #[test]
    fn entropy_nonnegative_for_random_weights() {
        let mut rng = crate::stream_rng(32, 0);
        for _ in 0..1000 {
            let k = rng.gen_range(2..6);
            let p = random_simplex(&mut rng, k);
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..4.0)).collect();
            assert!(weighted_entropy_resolved(&p, &w) >= 0.0);
        }
    }

    #[test]
    fn constant_weights_reduce_to_softmax_of_scaled_rewards() {
        let inst = instance_with_lengths(vec![1, 1, 1, 1]);
        let rewards = [0.9, 0.1, 0.4, 0.7];
        for beta in [0.25, 1.0, 3.0] {
            let p = solve_wer_policy(&rewards, &WeightScheme::ConstantOne, beta, &inst).unwrap();
            let z: f64 = rewards.iter().map(|r| (r / beta).exp()).sum();
            for (arm, &pi) in p.iter().enumerate() {
                assert_abs_diff_eq!(pi, (rewards[arm] / beta).exp() / z, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn constant_rewards_with_equal_weights_give_uniform() {
        let inst = instance_with_lengths(vec![1, 1, 1]);
        let p = solve_wer_policy(&[0.6; 3], &WeightScheme::ConstantOne, 0.7, &inst).unwrap();
        for pi in p {
            assert_abs_diff_eq!(pi, 1.0 / 3.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn solver_matches_dense_simplex_grid() {
        // Maximize sum pi (r - beta w log pi) directly on a 1e-3 grid of the
        // 2-simplex and compare the argmax coordinates.
        let inst = instance_with_lengths(vec![1, 1, 2]);
        let rewards = [1.0, 0.0, 0.0];
        let weights = [1.0, 1.0, 0.5];
        let beta = 1.0;
        let p = solve_wer_policy(
            &rewards,
            &WeightScheme::Explicit(weights.to_vec()),
            beta,
            &inst,
        )
        .unwrap();

        let objective = |q: &[f64]| -> f64 {
            q.iter()
                .zip(&rewards)
                .zip(&weights)
                .map(|((&qi, &ri), &wi)| {
                    if qi > 0.0 {
                        qi * (ri - beta * wi * qi.ln())
                    } else {
                        0.0
                    }
                })
                .sum()
        };

        let steps = 1000usize;
        let mut best = (f64::MIN, [0.0f64; 3]);
        for i in 0..=steps {
            let q0 = i as f64 / steps as f64;
            for j in 0..=(steps - i) {
                let q1 = j as f64 / steps as f64;
                let q2 = 1.0 - q0 - q1;
                let v = objective(&[q0, q1, q2]);
                if v > best.0 {
                    best = (v, [q0, q1, q2]);
                }
            }
        }
        for (solved, grid) in p.iter().zip(best.1) {
            assert!((solved - grid).abs() <= 2e-3, "{solved} vs grid {grid}");
        }
        // Global optimality: nothing on the grid beats the solved policy.
        assert!(objective(&p) >= best.0 - 1e-9);
    }

    #[test]
    fn reward_gap_identity_holds_for_random_draws() {
        let mut rng = crate::stream_rng(33, 0);
        for _ in 0..200 {
            let k = rng.gen_range(2..6);
            let lengths: Vec<u32> = (0..k).map(|_| rng.gen_range(1..40)).collect();
            let inst = instance_with_lengths(lengths);
            let rewards: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
            let beta = rng.gen_range(0.05..3.0);
            let scheme = if rng.gen_bool(0.5) {
                WeightScheme::InverseLength
            } else {
                WeightScheme::Explicit((0..k).map(|_| rng.gen_range(0.1..2.0)).collect())
            };
            let weights = scheme.resolve(&inst).unwrap();
            let p = solve_wer_policy(&rewards, &scheme, beta, &inst).unwrap();
            assert!(reward_gap_residual(&rewards, &p, &weights, beta) <= 1e-8);
        }
    }

    #[test]
    fn solver_beats_coarse_grid_objective() {
        let inst = instance_with_lengths(vec![1, 2, 4]);
        let rewards = [0.2, 0.9, 0.55];
        let scheme = WeightScheme::InverseLength;
        let weights = scheme.resolve(&inst).unwrap();
        let beta = 0.5;
        let p = solve_wer_policy(&rewards, &scheme, beta, &inst).unwrap();
        let objective = |q: &[f64]| -> f64 {
            q.iter()
                .zip(&rewards)
                .zip(&weights)
                .map(|((&qi, &ri), &wi)| {
                    if qi > 0.0 {
                        qi * (ri - beta * wi * qi.ln())
                    } else {
                        0.0
                    }
                })
                .sum()
        };
        let opt = objective(&p);
        let steps = 100usize;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let q = [
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    1.0 - (i + j) as f64 / steps as f64,
                ];
                assert!(opt >= objective(&q) - 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let inst = instance_with_lengths(vec![1, 1]);
        assert!(solve_wer_policy(&[0.1, 0.2], &WeightScheme::ConstantOne, 0.0, &inst).is_err());
        assert!(WeightScheme::Explicit(vec![1.0, -0.5])
            .resolve(&inst)
            .is_err());
        assert!(WeightScheme::Explicit(vec![1.0]).resolve(&inst).is_err());
    }
}
