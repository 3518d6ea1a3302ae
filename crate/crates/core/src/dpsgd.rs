//! DP-SGD: per-example clipping, Gaussian noise on the clipped sum, and the
//! Poisson-subsampled training loop that charges a [`PrivacyLedger`].

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accountant::{rdp_step, rdp_to_epsilon, PrivacyLedger};
use crate::corpus::PreparedExample;
use crate::model::{per_example_gradients, Objective, ParameterSet};
use crate::rng::Rng;
use crate::{Error, Result};

/// Slack allowed on the final spent ε relative to the ledger target.
pub const BUDGET_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    /// Noise std divided by `clip_norm`. Calibrated to the budget when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_multiplier: Option<f64>,
    /// Poisson inclusion probability per example per step.
    pub sampling_rate: f64,
    /// Passes over the data; the step count is `round(epochs / sampling_rate)`.
    pub epochs: f64,
    pub learning_rate: f64,
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::config("sampling_rate", "must lie in (0, 1]"));
        }
        if !(self.epochs >= 0.0 && self.epochs.is_finite()) {
            return Err(Error::config("epochs", "must be non-negative"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be non-negative"));
        }
        if let Some(s) = self.noise_multiplier {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config("noise_multiplier", "must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        (self.epochs / self.sampling_rate).round() as u64
    }

    /// Expected Poisson batch size for a dataset of `n` examples.
    pub fn expected_batch(&self, n: usize) -> f64 {
        self.sampling_rate * n as f64
    }
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `g` in place by `min(1, C/‖g‖₂)`; returns the pre-clip norm.
pub fn clip_in_place(g: &mut [f64], clip_norm: f64) -> f64 {
    let norm = l2_norm(g);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        g.iter_mut().for_each(|x| *x *= scale);
    }
    norm
}

pub fn clip_gradient(g: &[f64], clip_norm: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip_norm);
    out
}

/// `(Σ clipped + N(0, (σ·C)² I)) / denominator`.
pub fn noisy_mean(
    clipped: &[Vec<f64>],
    dim: usize,
    clip_norm: f64,
    noise_multiplier: f64,
    denominator: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if !(denominator > 0.0) {
        return Err(Error::InvalidArgument(
            "noisy mean denominator must be positive".into(),
        ));
    }
    let mut sum = vec![0.0; dim];
    for g in clipped {
        if g.len() != dim {
            return Err(Error::InvalidArgument("gradient length mismatch".into()));
        }
        for (s, x) in sum.iter_mut().zip(g) {
            *s += x;
        }
    }
    let std = noise_multiplier * clip_norm;
    for s in &mut sum {
        if std > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            *s += std * z;
        }
        *s /= denominator;
    }
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub batch_size: usize,
    /// Mean pre-update loss over the batch; absent for an empty batch.
    pub loss: Option<f64>,
    pub max_clipped_norm: f64,
}

/// One DP-SGD update over an already-sampled batch.
#[allow(clippy::too_many_arguments)]
pub fn dp_sgd_step(
    params: &mut ParameterSet,
    batch: &[PreparedExample],
    objective: &dyn Objective,
    clip_norm: f64,
    noise_multiplier: f64,
    learning_rate: f64,
    denominator: f64,
    rng: &mut Rng,
) -> Result<StepStats> {
    let dim = params.total_count();
    let mut clipped = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    let mut max_clipped_norm = 0.0f64;
    if !batch.is_empty() {
        for eg in per_example_gradients(params, batch, objective)? {
            loss += eg.loss;
            let mut g = eg.grad;
            clip_in_place(&mut g, clip_norm);
            max_clipped_norm = max_clipped_norm.max(l2_norm(&g));
            clipped.push(g);
        }
    }
    let update = noisy_mean(&clipped, dim, clip_norm, noise_multiplier, denominator, rng)?;
    for (p, u) in params.values.iter_mut().zip(&update) {
        *p -= learning_rate * u;
    }
    if !params.all_finite() {
        return Err(Error::NonFinite {
            context: "parameters after DP-SGD step".into(),
        });
    }
    Ok(StepStats {
        batch_size: batch.len(),
        loss: (!batch.is_empty()).then(|| loss / batch.len() as f64),
        max_clipped_norm,
    })
}

/// Independent inclusion of each index with probability `q`.
pub fn poisson_sample(n: usize, q: f64, rng: &mut Rng) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub noise_multiplier: f64,
    pub config: DpSgdConfig,
    /// Per-step statistics, in order.
    pub history: Vec<StepStats>,
    /// Spent ε after each step, at the ledger's δ.
    pub epsilon_curve: Vec<f64>,
    pub spent_epsilon: f64,
    #[serde(skip)]
    pub params: ParameterSet,
}

impl TrainReport {
    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().filter_map(|s| s.loss)
    }
}

/// DP-SGD training for `config.steps()` Poisson-subsampled steps. Each step
/// is charged to `ledger` before the update is applied; a step that would
/// push spent ε past the ledger target aborts with
/// [`Error::BudgetExhausted`].
pub fn train_dp(
    init: ParameterSet,
    data: &[PreparedExample],
    objective: &dyn Objective,
    config: &DpSgdConfig,
    ledger: &mut PrivacyLedger,
    rng: &mut Rng,
) -> Result<TrainReport> {
    config.validate()?;
    let sigma = config
        .noise_multiplier
        .ok_or_else(|| Error::config("noise_multiplier", "must be resolved before training"))?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training data".into()));
    }
    let steps = config.steps();
    let denominator = config.expected_batch(data.len());
    let step_rdp = if steps > 0 {
        rdp_step(config.sampling_rate, sigma, &ledger.orders)?
    } else {
        vec![0.0; ledger.orders.len()]
    };
    let limit = ledger.target.epsilon + BUDGET_SLACK;

    let mut params = init;
    let mut history = Vec::with_capacity(steps as usize);
    let mut epsilon_curve = Vec::with_capacity(steps as usize);
    for step in 0..steps as usize {
        let mut prospective = ledger.accumulated_rdp.clone();
        for (p, r) in prospective.iter_mut().zip(&step_rdp) {
            *p += r;
        }
        let eps = rdp_to_epsilon(&ledger.orders, &prospective, ledger.target.delta).0;
        if eps > limit {
            return Err(Error::BudgetExhausted {
                step,
                epsilon: eps,
                target: ledger.target.epsilon,
            });
        }
        let batch: Vec<PreparedExample> = poisson_sample(data.len(), config.sampling_rate, rng)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let stats = dp_sgd_step(
            &mut params,
            &batch,
            objective,
            config.clip_norm,
            sigma,
            config.learning_rate,
            denominator,
            rng,
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step },
            e => e,
        })?;
        ledger.compose(&step_rdp, 1)?;
        epsilon_curve.push(ledger.spent_epsilon());
        history.push(stats);
    }
    Ok(TrainReport {
        steps,
        noise_multiplier: sigma,
        config: config.clone(),
        history,
        epsilon_curve,
        spent_epsilon: ledger.spent_epsilon(),
        params,
    })
}

/// Teacher fine-tuning on control-code-prefixed private data.
pub fn train_teacher_dp(
    init: ParameterSet,
    data: &[PreparedExample],
    config: &DpSgdConfig,
    ledger: &mut PrivacyLedger,
    rng: &mut Rng,
) -> Result<TrainReport> {
    train_dp(
        init,
        data,
        &crate::model::NextTokenLoss,
        config,
        ledger,
        rng,
    )
}
