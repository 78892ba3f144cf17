//! Full-batch projected gradient descent over the `[0,1]` parameter box,
//! with optional oracle masks and dynamic-label updates.
//!
//! Plain gradient descent is deliberate: the learning-dynamics analysis in
//! [`crate::dynamics`] models exactly this update, and the hard-instance
//! optima sit on the box boundary where the coordinate-wise clamp is the
//! projection.

use crate::bandit::SoftmaxPolicy;
use crate::objectives::{
    self, LossContext, Method, MethodSpec, ObjectiveError,
};
use crate::sigmoid;

/// Tolerance on the projected gradient below which training stops early.
const CONVERGENCE_TOL: f64 = 1e-8;
/// Tolerance on label movement below which dynamic labels count as settled.
const LABEL_TOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Gradient-descent schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Snapshot the trace every this many steps (the initial and final
    /// states are always recorded).
    pub record_every: usize,
    /// Run the dynamic-label update after each step (POWER-DL only).
    pub label_update: bool,
    /// Stream label for dataset construction by callers; the descent itself
    /// is deterministic and does not consume randomness.
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, steps: usize) -> Self {
        Self {
            learning_rate,
            steps,
            record_every: steps,
            label_update: false,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::BadConfig(format!(
                "learning_rate = {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(TrainError::BadConfig("steps must be at least 1".into()));
        }
        if self.record_every == 0 || self.record_every > self.steps {
            return Err(TrainError::BadConfig(format!(
                "record_every = {} must lie in 1..=steps",
                self.record_every
            )));
        }
        Ok(())
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub final_theta: SoftmaxPolicy,
    pub final_loss: f64,
    /// `(step, parameters)` snapshots.
    pub theta_trace: Vec<(usize, Vec<f64>)>,
    /// `(step, loss)` snapshots aligned with `theta_trace`.
    pub loss_trace: Vec<(usize, f64)>,
    /// Dynamic labels after the last step (initial values if no updates ran).
    pub final_labels: Vec<f64>,
    /// Updates actually performed (early stopping can cut this short).
    pub steps_run: usize,
    pub converged: bool,
}

/// Run projected gradient descent for `spec` starting from `ctx.policy`.
///
/// Each step takes `theta <- clamp(theta - alpha grad)` on unmasked
/// coordinates. When `cfg.label_update` is set and the method is POWER-DL,
/// the per-sample dynamic labels are mixed toward their stationary values
/// after every step, with the gradient treating them as constants.
///
/// Stops early once every free coordinate is either flat (gradient within
/// `1e-8`) or pinned at a box face with the gradient pointing outward, and
/// labels have stopped moving. Deterministic given its inputs.
pub fn train(
    spec: &MethodSpec,
    ctx: &LossContext,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    let mut work = ctx.clone();
    let k = work.arm_count();
    let update_labels = cfg.label_update && spec.method()? == Method::PowerDl;
    let stats = if update_labels {
        Some(work.dataset.empirical_stats().map_err(ObjectiveError::from)?)
    } else {
        None
    };
    let dyn_gamma = if update_labels {
        spec.require_dyn_gamma()?
    } else {
        0.0
    };

    let mut theta_trace = Vec::new();
    let mut loss_trace = Vec::new();
    let mut steps_run = 0;
    let mut converged = false;
    // Labels count as settled if they are not being updated at all.
    let mut label_delta = if update_labels && dyn_gamma > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };

    for step in 0..cfg.steps {
        let (loss, grad) = objectives::loss_and_grad(spec, &work)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { step });
        }
        if step % cfg.record_every == 0 {
            theta_trace.push((step, work.policy.params().to_vec()));
            loss_trace.push((step, loss));
        }

        if projected_grad_norm(&work, &grad) <= CONVERGENCE_TOL && label_delta <= LABEL_TOL {
            converged = true;
            break;
        }

        let params: Vec<f64> = work
            .policy
            .params()
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                if work.oracle_mask[i] {
                    t
                } else {
                    (t - cfg.learning_rate * grad[i]).clamp(0.0, 1.0)
                }
            })
            .collect();
        work.policy = SoftmaxPolicy::new(params).expect("clamped into box");
        steps_run = step + 1;

        if update_labels {
            let stats = stats.as_ref().expect("stats computed");
            let stationary = objectives::power_dl_stationary_labels(spec, &work, stats)?;
            let current: Vec<f64> = work.dataset.samples().iter().map(|s| s.dyn_label).collect();
            let next = objectives::update_labels(&current, &stationary, dyn_gamma)?;
            label_delta = current
                .iter()
                .zip(&next)
                .map(|(c, n)| (c - n).abs())
                .fold(0.0, f64::max);
            for (sample, &l) in work.dataset.samples_mut().iter_mut().zip(&next) {
                sample.dyn_label = l;
            }
        }
    }

    let final_loss = objectives::loss(spec, &work)?;
    if !final_loss.is_finite() {
        return Err(TrainError::NonFinite { step: steps_run });
    }
    if theta_trace.last().map(|(s, _)| *s) != Some(steps_run) {
        theta_trace.push((steps_run, work.policy.params().to_vec()));
        loss_trace.push((steps_run, final_loss));
    }

    Ok(TrainResult {
        final_theta: work.policy,
        final_loss,
        theta_trace,
        loss_trace,
        final_labels: work.dataset.samples().iter().map(|s| s.dyn_label).collect(),
        steps_run,
        converged,
    })
}

/// Largest magnitude of the projected gradient over free coordinates: box
/// faces with outward-pointing gradients contribute zero.
fn projected_grad_norm(ctx: &LossContext, grad: &[f64]) -> f64 {
    ctx.policy
        .params()
        .iter()
        .zip(grad)
        .zip(&ctx.oracle_mask)
        .map(|((&t, &g), &frozen)| {
            if frozen {
                0.0
            } else if t <= 0.0 {
                g.min(0.0).abs()
            } else if t >= 1.0 {
                g.max(0.0)
            } else {
                g.abs()
            }
        })
        .fold(0.0, f64::max)
}

/// One isolated batch update of the parameter gap `d = theta(y1) - theta(y0)`
/// for a pair compared with empirical frequency `mu_pair` and won by `y1`
/// with conditional frequency `mu_win`:
///
/// `d + alpha mu_pair [ (2 mu_win - 1) l - (sigma(d) - (1 - mu_win)) ]`.
pub fn learning_dynamics_step(
    theta_gap: f64,
    label: f64,
    mu_pair: f64,
    mu_win: f64,
    alpha: f64,
) -> f64 {
    debug_assert!((0.0..=1.0).contains(&mu_pair));
    debug_assert!((0.0..=1.0).contains(&mu_win));
    let mu_lose = 1.0 - mu_win;
    theta_gap + alpha * mu_pair * ((mu_win - mu_lose) * label - (sigmoid(theta_gap) - mu_lose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::{BanditInstance, PreferenceDataset, PreferenceSample};
    use crate::hard_instances::{self, Type1Variant};
    use crate::objectives::MuEstimate;
    use crate::wer::WeightScheme;
    use approx::assert_abs_diff_eq;

    fn two_arm_ctx(theta: Vec<f64>, wins_for_one: usize, total: usize) -> LossContext {
        let samples: Vec<PreferenceSample> = (0..total)
            .map(|i| PreferenceSample::new(1, 0, u8::from(i < wins_for_one)).unwrap())
            .collect();
        LossContext::with_mask(
            SoftmaxPolicy::new(theta.clone()).unwrap(),
            SoftmaxPolicy::new(theta).unwrap(),
            PreferenceDataset::new(samples),
            vec![1, 1],
            vec![true, false],
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bitwise() {
        let ctx = two_arm_ctx(vec![0.3, 0.71], 3, 5);
        let spec = MethodSpec::new(Method::Dpo).with_beta(0.5);
        let cfg = TrainConfig::new(0.0, 50);
        let out = train(&spec, &ctx, &cfg).unwrap();
        assert_eq!(out.final_theta.params(), ctx.policy.params());
    }

    #[test]
    fn training_is_reproducible() {
        let ctx = two_arm_ctx(vec![0.2, 0.6], 7, 10);
        let spec = MethodSpec::new(Method::PowerDl)
            .with_beta(1.0)
            .with_eta(0.1)
            .with_dyn_gamma(0.3)
            .with_weights(WeightScheme::ConstantOne)
            .with_mu_estimate(MuEstimate::Aggregated);
        let mut cfg = TrainConfig::new(0.05, 200);
        cfg.label_update = true;
        let a = train(&spec, &ctx, &cfg).unwrap();
        let b = train(&spec, &ctx, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dpo_on_forced_type1_event_hits_the_upper_box_face() {
        let bundle = hard_instances::make_type1_instance(Type1Variant::One, 10).unwrap();
        let data = hard_instances::force_event(&bundle, 10, 3);
        let ctx = bundle.loss_context(data).unwrap();
        let spec = MethodSpec::new(Method::Dpo).with_beta(0.1);
        let out = train(&spec, &ctx, &TrainConfig::new(0.1, 2000)).unwrap();
        assert!(out.final_theta.params()[2] >= 1.0 - 1e-3);
    }

    #[test]
    fn power_with_large_sft_weight_recovers_best_in_class() {
        // eta = 0.95 exceeds (2+e)/(N-(2+e)) at N = 10, so the free
        // coordinate is driven to the lower face.
        let bundle = hard_instances::make_type1_instance(Type1Variant::One, 10).unwrap();
        let data = hard_instances::force_event(&bundle, 10, 4);
        let ctx = bundle.loss_context(data).unwrap();
        let spec = MethodSpec::new(Method::Power)
            .with_beta(1.0)
            .with_eta(0.95)
            .with_weights(WeightScheme::InverseLength);
        let out = train(&spec, &ctx, &TrainConfig::new(1.0, 2000)).unwrap();
        assert!(out.final_theta.params()[2] <= 1e-3);
    }

    #[test]
    fn dynamics_step_examples() {
        // Stationarity: sigma(d) matches the label-weighted preference.
        let mu_win: f64 = 0.8;
        let l = 0.6;
        let target = (1.0 - mu_win) + (2.0 * mu_win - 1.0) * l;
        let d = (target / (1.0 - target)).ln();
        assert_abs_diff_eq!(
            learning_dynamics_step(d, l, 0.7, mu_win, 0.3),
            d,
            epsilon = 1e-12
        );
        // No coverage, no update.
        assert_eq!(learning_dynamics_step(0.4, 1.0, 0.0, 0.75, 0.5), 0.4);
        // Direct arithmetic.
        assert_abs_diff_eq!(
            learning_dynamics_step(0.0, 1.0, 1.0, 0.75, 0.1),
            0.025,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dynamics_step_matches_isolated_train_step() {
        // Two arms, the y0 coordinate frozen: one gradient step on the
        // constant-weight pairwise loss moves the gap exactly as the
        // isolated update formula predicts.
        let alpha = 0.05;
        let (wins, total) = (6, 8);
        let ctx = two_arm_ctx(vec![0.4, 0.5], wins, total);
        let spec = MethodSpec::new(Method::Power)
            .with_beta(1.0)
            .with_eta(0.0)
            .with_weights(WeightScheme::ConstantOne);
        let out = train(&spec, &ctx, &TrainConfig::new(alpha, 1)).unwrap();
        let d0 = ctx.policy.params()[1] - ctx.policy.params()[0];
        let d1 = out.final_theta.params()[1] - out.final_theta.params()[0];
        let expected = learning_dynamics_step(d0, 1.0, 1.0, wins as f64 / total as f64, alpha);
        assert_abs_diff_eq!(d1, expected, epsilon = 1e-10);
    }

    #[test]
    fn ipo_descent_is_monotone_below_the_curvature_limit() {
        let inst = BanditInstance::new(
            vec![0.0, 0.0, 1.0],
            vec![1, 1, 1],
            vec![((0, 1), 0.9), ((0, 2), 0.1)],
        )
        .unwrap();
        let data = inst.sample_dataset(20, 9);
        let n = data.len() as f64;
        let ctx = LossContext::with_mask(
            SoftmaxPolicy::new(vec![0.0, 0.0, 1.0]).unwrap(),
            SoftmaxPolicy::new(vec![0.0, 0.0, 1.0]).unwrap(),
            data,
            vec![1, 1, 1],
            vec![true, true, false],
        )
        .unwrap();
        let spec = MethodSpec::new(Method::Ipo).with_tau(0.8);
        // Mean-loss curvature in the free coordinate is at most 2/N.
        let mut cfg = TrainConfig::new(0.9 * n, 300);
        cfg.record_every = 1;
        let out = train(&spec, &ctx, &cfg).unwrap();
        for pair in out.loss_trace.windows(2) {
            assert!(pair[1].1 <= pair[0].1 + 1e-12);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_step_index() {
        let ctx = two_arm_ctx(vec![0.2, 0.9], 1, 1);
        let spec = MethodSpec::new(Method::Power)
            .with_beta(1e8)
            .with_eta(0.0)
            .with_weights(WeightScheme::Explicit(vec![1e308, 1e308]));
        let err = train(&spec, &ctx, &TrainConfig::new(0.1, 10)).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 0 }));
    }

    #[test]
    fn config_validation() {
        let ctx = two_arm_ctx(vec![0.2, 0.9], 1, 1);
        let spec = MethodSpec::new(Method::Dpo).with_beta(1.0);
        assert!(train(&spec, &ctx, &TrainConfig::new(-1.0, 10)).is_err());
        assert!(train(&spec, &ctx, &TrainConfig::new(0.1, 0)).is_err());
        let mut cfg = TrainConfig::new(0.1, 10);
        cfg.record_every = 11;
        assert!(train(&spec, &ctx, &cfg).is_err());
    }
}
