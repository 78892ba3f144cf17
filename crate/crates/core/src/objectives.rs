//! Losses and analytic gradients for preference-optimization objectives on
//! softmax bandit policies, plus the stationary/dynamic label machinery.
//!
//! All losses are dataset *means*, so learning-rate semantics do not depend
//! on the dataset size. Gradients are exact (they are checked against
//! central finite differences in the test suites) and treat dynamic labels
//! as constants (stop-gradient).

use crate::bandit::{BanditError, BanditInstance, EmpiricalStats, PreferenceDataset, SoftmaxPolicy};
use crate::wer::{WeightScheme, WerError};
use crate::{log_sigmoid, sigmoid, softplus};

/// Errors from objective evaluation.
#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("{method} requires hyperparameter `{field}`")]
    MissingHyper {
        method: &'static str,
        field: &'static str,
    },
    #[error("{method}: hyperparameter `{field}` = {value} must satisfy {expect}")]
    InvalidHyper {
        method: &'static str,
        field: &'static str,
        value: f64,
        expect: &'static str,
    },
    #[error("policy has {policy} arms but context expects {expected}")]
    DimensionMismatch { policy: usize, expected: usize },
    #[error("sample references arm {0} outside the {1}-arm instance")]
    SampleOutOfRange(usize, usize),
    #[error("stationary label undefined for tie preferences (mu_win = mu_lose)")]
    TiePreference,
    #[error("empirical win probabilities must sum to 1, got {0}")]
    BadMuPair(f64),
    #[error("label mixing rate gamma = {0} must lie in [0, 1]")]
    BadGamma(f64),
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error(transparent)]
    Wer(#[from] WerError),
}

/// Preference-optimization method identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Dpo,
    DpoSft,
    CDpo,
    RDpo,
    Ipo,
    ChiPo,
    SppoOffline,
    Cpo,
    Rrhf,
    SlicHf,
    Orpo,
    SimPo,
    Ropo,
    Power,
    PowerDl,
}

impl Method {
    pub const ALL: [Method; 15] = [
        Method::Dpo,
        Method::DpoSft,
        Method::CDpo,
        Method::RDpo,
        Method::Ipo,
        Method::ChiPo,
        Method::SppoOffline,
        Method::Cpo,
        Method::Rrhf,
        Method::SlicHf,
        Method::Orpo,
        Method::SimPo,
        Method::Ropo,
        Method::Power,
        Method::PowerDl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::DpoSft => "dpo-sft",
            Method::CDpo => "cdpo",
            Method::RDpo => "r-dpo",
            Method::Ipo => "ipo",
            Method::ChiPo => "chipo",
            Method::SppoOffline => "sppo",
            Method::Cpo => "cpo",
            Method::Rrhf => "rrhf",
            Method::SlicHf => "slic-hf",
            Method::Orpo => "orpo",
            Method::SimPo => "simpo",
            Method::Ropo => "ropo",
            Method::Power => "power",
            Method::PowerDl => "power-dl",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// How the dynamic-label update estimates the empirical preference of a
/// sample's pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MuEstimate {
    /// Conditional win frequencies aggregated over the whole dataset.
    #[default]
    Aggregated,
    /// Treat the sample's own label as the estimate (`mu_win = 1` in the
    /// winner orientation), so the stationary label is the learned
    /// preference itself.
    PerSampleLabel,
}

/// A method identifier plus its hyperparameters. Only fields relevant to
/// the chosen method are ever read; reading an unset required field is an
/// error.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MethodSpec {
    pub method: Option<Method>,
    pub beta: Option<f64>,
    /// SFT coefficient for DPO+SFT / POWER / POWER-DL.
    pub eta: Option<f64>,
    /// IPO preference-gap temperature.
    pub tau: Option<f64>,
    /// SimPO target margin.
    pub gamma_margin: Option<f64>,
    /// cDPO flip probability.
    pub c_flip: Option<f64>,
    /// chi-PO clip radius `R` (arguments clip to `[-2R, 2R]`).
    pub clip_radius: Option<f64>,
    /// R-DPO length coefficient.
    pub alpha_len: Option<f64>,
    /// SFT/hinge mixing weight for CPO, RRHF, SLiC-HF, ORPO.
    pub lambda_sft: Option<f64>,
    /// SLiC-HF hinge margin.
    pub rho_hinge: Option<f64>,
    pub alpha_ropo: Option<f64>,
    pub gamma_ropo: Option<f64>,
    /// Entropy weights for POWER / POWER-DL.
    pub weights: WeightScheme,
    /// POWER-DL label mixing rate.
    pub dyn_gamma: Option<f64>,
    pub mu_estimate: MuEstimate,
}

macro_rules! with_setters {
    ($($setter:ident => $field:ident),* $(,)?) => {
        $(pub fn $setter(mut self, value: f64) -> Self {
            self.$field = Some(value);
            self
        })*
    };
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method: Some(method),
            ..Self::default()
        }
    }

    with_setters! {
        with_beta => beta,
        with_eta => eta,
        with_tau => tau,
        with_gamma_margin => gamma_margin,
        with_c_flip => c_flip,
        with_clip_radius => clip_radius,
        with_alpha_len => alpha_len,
        with_lambda_sft => lambda_sft,
        with_rho_hinge => rho_hinge,
        with_alpha_ropo => alpha_ropo,
        with_gamma_ropo => gamma_ropo,
        with_dyn_gamma => dyn_gamma,
    }

    pub fn with_weights(mut self, weights: WeightScheme) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_mu_estimate(mut self, mu: MuEstimate) -> Self {
        self.mu_estimate = mu;
        self
    }

    pub fn method(&self) -> Result<Method, ObjectiveError> {
        self.method.ok_or(ObjectiveError::MissingHyper {
            method: "spec",
            field: "method",
        })
    }

    /// Validated POWER-DL label mixing rate.
    pub fn require_dyn_gamma(&self) -> Result<f64, ObjectiveError> {
        self.require("dyn_gamma")
    }

    fn require(&self, field: &'static str) -> Result<f64, ObjectiveError> {
        let method = self.method.map_or("spec", Method::name);
        let value = match field {
            "beta" => self.beta,
            "eta" => self.eta,
            "tau" => self.tau,
            "gamma_margin" => self.gamma_margin,
            "c_flip" => self.c_flip,
            "clip_radius" => self.clip_radius,
            "alpha_len" => self.alpha_len,
            "lambda_sft" => self.lambda_sft,
            "rho_hinge" => self.rho_hinge,
            "alpha_ropo" => self.alpha_ropo,
            "gamma_ropo" => self.gamma_ropo,
            "dyn_gamma" => self.dyn_gamma,
            _ => unreachable!("unknown field {field}"),
        };
        let value = value.ok_or(ObjectiveError::MissingHyper { method, field })?;
        let ok = match field {
            "beta" | "eta" => value >= 0.0,
            "tau" | "clip_radius" => value > 0.0,
            "c_flip" => (0.0..1.0).contains(&value),
            "dyn_gamma" => (0.0..=1.0).contains(&value),
            _ => true,
        };
        if !ok || !value.is_finite() {
            let expect = match field {
                "beta" | "eta" => ">= 0",
                "tau" | "clip_radius" => "> 0",
                "c_flip" => "0 <= c < 1",
                "dyn_gamma" => "0 <= gamma <= 1",
                _ => "a finite value",
            };
            return Err(ObjectiveError::InvalidHyper {
                method,
                field,
                value,
                expect,
            });
        }
        Ok(value)
    }
}

/// Everything a loss evaluation needs besides the method spec: current and
/// reference parameters, the dataset, response lengths, and the oracle mask
/// (`true` = parameter frozen at its revealed value).
#[derive(Debug, Clone, PartialEq)]
pub struct LossContext {
    pub policy: SoftmaxPolicy,
    pub reference: SoftmaxPolicy,
    pub dataset: PreferenceDataset,
    pub lengths: Vec<u32>,
    pub oracle_mask: Vec<bool>,
}

impl LossContext {
    /// Context over `instance` with no oracle mask.
    pub fn new(
        instance: &BanditInstance,
        policy: SoftmaxPolicy,
        reference: SoftmaxPolicy,
        dataset: PreferenceDataset,
    ) -> Result<Self, ObjectiveError> {
        let k = instance.arm_count();
        Self::with_mask(policy, reference, dataset, instance.lengths().to_vec(), vec![false; k])
    }

    pub fn with_mask(
        policy: SoftmaxPolicy,
        reference: SoftmaxPolicy,
        dataset: PreferenceDataset,
        lengths: Vec<u32>,
        oracle_mask: Vec<bool>,
    ) -> Result<Self, ObjectiveError> {
        let k = lengths.len();
        for (count, label) in [(policy.arm_count(), "policy"), (reference.arm_count(), "ref")] {
            if count != k {
                let _ = label;
                return Err(ObjectiveError::DimensionMismatch {
                    policy: count,
                    expected: k,
                });
            }
        }
        if oracle_mask.len() != k {
            return Err(ObjectiveError::DimensionMismatch {
                policy: oracle_mask.len(),
                expected: k,
            });
        }
        for s in dataset.samples() {
            if s.arm_a >= k || s.arm_b >= k {
                return Err(ObjectiveError::SampleOutOfRange(s.arm_a.max(s.arm_b), k));
            }
        }
        Ok(Self {
            policy,
            reference,
            dataset,
            lengths,
            oracle_mask,
        })
    }

    pub fn arm_count(&self) -> usize {
        self.lengths.len()
    }

    /// Indices of coordinates the optimizer may move.
    pub fn free_coords(&self) -> Vec<usize> {
        self.oracle_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &frozen)| (!frozen).then_some(i))
            .collect()
    }
}

/// Mean loss of `spec` over the context's dataset.
pub fn loss(spec: &MethodSpec, ctx: &LossContext) -> Result<f64, ObjectiveError> {
    Ok(eval(spec, ctx, false)?.0)
}

/// Exact gradient of [`loss`] with respect to the free policy parameters;
/// oracle-masked coordinates are exactly zero.
pub fn grad(spec: &MethodSpec, ctx: &LossContext) -> Result<Vec<f64>, ObjectiveError> {
    Ok(eval(spec, ctx, true)?.1.expect("gradient requested"))
}

/// Loss and gradient in one pass.
pub fn loss_and_grad(
    spec: &MethodSpec,
    ctx: &LossContext,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let (l, g) = eval(spec, ctx, true)?;
    Ok((l, g.expect("gradient requested")))
}

/// Gradient accumulator for terms of the form `c * (e_y - pi)`: the point
/// masses and the shared softmax pullback are tracked separately.
struct GradAcc {
    point: Vec<f64>,
    pi_coeff: f64,
}

impl GradAcc {
    fn new(k: usize) -> Self {
        Self {
            point: vec![0.0; k],
            pi_coeff: 0.0,
        }
    }

    /// Add `c * d log pi(y) = c * (e_y - pi)`.
    fn add_log_prob(&mut self, y: usize, c: f64) {
        self.point[y] += c;
        self.pi_coeff += c;
    }

    /// Add `c * d theta(y) = c * e_y`.
    fn add_param(&mut self, y: usize, c: f64) {
        self.point[y] += c;
    }
}

fn eval(
    spec: &MethodSpec,
    ctx: &LossContext,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), ObjectiveError> {
    let method = spec.method()?;
    let k = ctx.arm_count();
    let n = ctx.dataset.len();
    if n == 0 {
        return Err(BanditError::EmptyDataset.into());
    }

    let theta = ctx.policy.params();
    let theta0 = ctx.reference.params();
    let probs = ctx.policy.probs();
    let logp = ctx.policy.log_probs();
    let probs0 = ctx.reference.probs();
    let logp0 = ctx.reference.log_probs();
    let weights = match method {
        Method::Power | Method::PowerDl => spec.weights.resolve_for_lengths(&ctx.lengths)?,
        _ => Vec::new(),
    };

    let mut total = 0.0;
    let mut acc = GradAcc::new(k);

    // POWER per-sample term with chosen arm `a` and rejected arm `b`,
    // scaled by `factor` (the dynamic label mixes the two orientations).
    let power_term = |a: usize,
                      b: usize,
                      factor: f64,
                      beta: f64,
                      eta: f64,
                      total: &mut f64,
                      acc: &mut GradAcc,
                      grad: bool| {
        let (wa, wb) = (weights[a], weights[b]);
        let m = beta * (wa * logp[a] - wb * logp[b] + wa - wb);
        *total += factor * (softplus(-m) - eta * beta * wa * logp[a]);
        if grad {
            let dldm = -sigmoid(-m) * factor;
            acc.add_log_prob(a, dldm * beta * wa);
            acc.add_log_prob(b, -dldm * beta * wb);
            acc.add_log_prob(a, -factor * eta * beta * wa);
        }
    };

    for sample in ctx.dataset.samples() {
        let a = sample.chosen();
        let b = sample.rejected();
        let (la, lb) = (
            f64::from(ctx.lengths[a]),
            f64::from(ctx.lengths[b]),
        );
        let dtheta = theta[a] - theta[b];
        let dtheta0 = theta0[a] - theta0[b];

        match method {
            Method::Dpo => {
                let beta = spec.require("beta")?;
                let g = beta * (dtheta - dtheta0);
                total += softplus(-g);
                if want_grad {
                    let dldg = -sigmoid(-g);
                    acc.add_param(a, dldg * beta);
                    acc.add_param(b, -dldg * beta);
                }
            }
            Method::DpoSft => {
                let beta = spec.require("beta")?;
                let eta = spec.require("eta")?;
                let g = beta * (dtheta - dtheta0);
                total += softplus(-g) - eta * beta * logp[a];
                if want_grad {
                    let dldg = -sigmoid(-g);
                    acc.add_param(a, dldg * beta);
                    acc.add_param(b, -dldg * beta);
                    acc.add_log_prob(a, -eta * beta);
                }
            }
            Method::CDpo => {
                let beta = spec.require("beta")?;
                let c = spec.require("c_flip")?;
                let g = beta * (dtheta - dtheta0);
                total += (1.0 - c) * softplus(-g) + c * softplus(g);
                if want_grad {
                    let dldg = -(1.0 - c) * sigmoid(-g) + c * sigmoid(g);
                    acc.add_param(a, dldg * beta);
                    acc.add_param(b, -dldg * beta);
                }
            }
            Method::RDpo => {
                let beta = spec.require("beta")?;
                let alpha = spec.require("alpha_len")?;
                let u = beta * (dtheta - dtheta0) - alpha * (la - lb);
                total += softplus(-u);
                if want_grad {
                    let dldu = -sigmoid(-u);
                    acc.add_param(a, dldu * beta);
                    acc.add_param(b, -dldu * beta);
                }
            }
            Method::Ipo => {
                let tau = spec.require("tau")?;
                let v = dtheta - dtheta0 - 1.0 / (2.0 * tau);
                total += v * v;
                if want_grad {
                    acc.add_param(a, 2.0 * v);
                    acc.add_param(b, -2.0 * v);
                }
            }
            Method::ChiPo => {
                let beta = spec.require("beta")?;
                let bound = 2.0 * spec.require("clip_radius")?;
                let (ra, rb) = (probs[a] / probs0[a], probs[b] / probs0[b]);
                let (rhoa, rhob) = (logp[a] - logp0[a], logp[b] - logp0[b]);
                let t = beta * ((ra + rhoa) - (rb + rhob));
                let u = t.clamp(-bound, bound);
                total += softplus(-u);
                if want_grad && t.abs() < bound {
                    let dldt = -sigmoid(-u);
                    acc.add_log_prob(a, dldt * beta * (ra + 1.0));
                    acc.add_log_prob(b, -dldt * beta * (rb + 1.0));
                }
            }
            Method::SppoOffline => {
                let beta = spec.require("beta")?;
                let va = beta * (logp[a] - logp0[a]) - 0.5;
                let vb = beta * (logp[b] - logp0[b]) + 0.5;
                total += va * va + vb * vb;
                if want_grad {
                    acc.add_log_prob(a, 2.0 * va * beta);
                    acc.add_log_prob(b, 2.0 * vb * beta);
                }
            }
            Method::Cpo => {
                let beta = spec.require("beta")?;
                let lambda = spec.require("lambda_sft")?;
                let m = beta * dtheta;
                total += softplus(-m) - lambda * logp[a];
                if want_grad {
                    let dldm = -sigmoid(-m);
                    acc.add_param(a, dldm * beta);
                    acc.add_param(b, -dldm * beta);
                    acc.add_log_prob(a, -lambda);
                }
            }
            Method::Rrhf => {
                let lambda = spec.require("lambda_sft")?;
                let h = -logp[a] / la + logp[b] / lb;
                total += h.max(0.0) - lambda * logp[a];
                if want_grad {
                    if h > 0.0 {
                        acc.add_log_prob(a, -1.0 / la);
                        acc.add_log_prob(b, 1.0 / lb);
                    }
                    acc.add_log_prob(a, -lambda);
                }
            }
            Method::SlicHf => {
                let rho = spec.require("rho_hinge")?;
                let lambda = spec.require("lambda_sft")?;
                let h = rho - dtheta;
                total += h.max(0.0) - lambda * logp[a];
                if want_grad {
                    if h > 0.0 {
                        acc.add_param(a, -1.0);
                        acc.add_param(b, 1.0);
                    }
                    acc.add_log_prob(a, -lambda);
                }
            }
            Method::Orpo => {
                let lambda = spec.require("lambda_sft")?;
                // Length-normalized probabilities p(y) = pi(y)^(1/|y|) and
                // their log odds.
                let (qa, qb) = (logp[a] / la, logp[b] / lb);
                let (pa, pb) = (qa.exp(), qb.exp());
                let z = (qa - (-pa).ln_1p()) - (qb - (-pb).ln_1p());
                total += -qa + lambda * softplus(-z);
                if want_grad {
                    let s = lambda * sigmoid(-z);
                    acc.add_log_prob(a, (-1.0 - s / (1.0 - pa)) / la);
                    acc.add_log_prob(b, (s / (1.0 - pb)) / lb);
                }
            }
            Method::SimPo => {
                let beta = spec.require("beta")?;
                let gamma = spec.require("gamma_margin")?;
                let m = beta * (logp[a] / la - logp[b] / lb) - gamma;
                total += softplus(-m);
                if want_grad {
                    let dldm = -sigmoid(-m);
                    acc.add_log_prob(a, dldm * beta / la);
                    acc.add_log_prob(b, -dldm * beta / lb);
                }
            }
            Method::Ropo => {
                let beta = spec.require("beta")?;
                let alpha = spec.require("alpha_ropo")?;
                let gamma = spec.require("gamma_ropo")?;
                let g = beta * (dtheta - dtheta0);
                total += -alpha * log_sigmoid(g) + gamma * sigmoid(-g);
                if want_grad {
                    let dldg = -alpha * sigmoid(-g) - gamma * sigmoid(-g) * sigmoid(g);
                    acc.add_param(a, dldg * beta);
                    acc.add_param(b, -dldg * beta);
                }
            }
            Method::Power => {
                let beta = spec.require("beta")?;
                let eta = spec.require("eta")?;
                power_term(a, b, 1.0, beta, eta, &mut total, &mut acc, want_grad);
            }
            Method::PowerDl => {
                let beta = spec.require("beta")?;
                let eta = spec.require("eta")?;
                let l = sample.dyn_label;
                power_term(a, b, l, beta, eta, &mut total, &mut acc, want_grad);
                power_term(b, a, 1.0 - l, beta, eta, &mut total, &mut acc, want_grad);
            }
        }
    }

    let mean_loss = total / n as f64;
    let gradient = want_grad.then(|| {
        let nf = n as f64;
        (0..k)
            .map(|i| {
                if ctx.oracle_mask[i] {
                    0.0
                } else {
                    (acc.point[i] - acc.pi_coeff * probs[i]) / nf
                }
            })
            .collect()
    });
    Ok((mean_loss, gradient))
}

/// The label value that zeroes the isolated gradient of a pair:
/// `(sigma(d) - mu_lose) / (mu_win - mu_lose)`.
pub fn stationary_label(d: f64, mu_win: f64, mu_lose: f64) -> Result<f64, ObjectiveError> {
    let total = mu_win + mu_lose;
    if (total - 1.0).abs() > 1e-9 {
        return Err(ObjectiveError::BadMuPair(total));
    }
    if mu_win == mu_lose {
        return Err(ObjectiveError::TiePreference);
    }
    Ok((sigmoid(d) - mu_lose) / (mu_win - mu_lose))
}

/// One dynamic-label mixing step `l <- (1 - gamma) l + gamma l_bar`,
/// elementwise. Labels are constants in gradients.
pub fn update_labels(
    labels: &[f64],
    stationary: &[f64],
    gamma: f64,
) -> Result<Vec<f64>, ObjectiveError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(ObjectiveError::BadGamma(gamma));
    }
    assert_eq!(labels.len(), stationary.len());
    Ok(labels
        .iter()
        .zip(stationary)
        .map(|(&l, &s)| (1.0 - gamma) * l + gamma * s)
        .collect())
}

/// Per-sample stationary labels for a POWER-DL context, in the winner
/// orientation of each sample.
///
/// The preference margin is the weighted log-probability gap plus the weight
/// margin. Tie preferences (empirical win frequency exactly one half) leave
/// the current label unchanged.
pub fn power_dl_stationary_labels(
    spec: &MethodSpec,
    ctx: &LossContext,
    stats: &EmpiricalStats,
) -> Result<Vec<f64>, ObjectiveError> {
    let weights = spec.weights.resolve_for_lengths(&ctx.lengths)?;
    let logp = ctx.policy.log_probs();
    ctx.dataset
        .samples()
        .iter()
        .map(|sample| {
            let a = sample.chosen();
            let b = sample.rejected();
            let margin = weights[a] * logp[a] - weights[b] * logp[b] + weights[a] - weights[b];
            let mu_win = match spec.mu_estimate {
                MuEstimate::Aggregated => stats
                    .win_prob(a, b)
                    .expect("sample's own pair is observed"),
                MuEstimate::PerSampleLabel => 1.0,
            };
            if mu_win == 0.5 {
                return Ok(sample.dyn_label);
            }
            stationary_label(margin, mu_win, 1.0 - mu_win)
        })
        .collect()
}
