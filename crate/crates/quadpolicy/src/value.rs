//! Value-network fitting against Monte-Carlo targets with Huber loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mlp::{HuberSpec, Mlp};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueFitConfig {
    /// Optimizer iterations per learning step.
    pub max_iterations: usize,
    /// Stop early once the mean Huber loss drops below this.
    pub loss_threshold: f64,
    /// Base step size of the adaptive first-order optimizer.
    pub step_size: f64,
    /// Huber knee.
    pub huber_delta: f64,
    /// Uniform subsample cap on the training set (0 disables). Bounds
    /// memory when an iteration produces on the order of a million states.
    pub sample_cap: usize,
}

impl Default for ValueFitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            loss_threshold: 1e-4,
            step_size: 1e-3,
            huber_delta: 1.0,
            sample_cap: 200_000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValueFitReport {
    pub final_loss: f64,
    pub iterations: usize,
    /// Step-size halvings triggered by the monotonicity safeguard.
    pub backtracks: usize,
}

/// Fit the value network to (observation, target) samples.
///
/// Full-batch adaptive first-order descent (Adam-style moments) with a
/// halving safeguard: a proposed step that increases the full-batch loss is
/// rolled back and retried at half the step size, so the recorded loss
/// sequence is non-increasing. Runs at most `max_iterations` steps,
/// stopping early when the loss goes below `loss_threshold`.
pub fn fit_value(
    value: &mut Mlp,
    samples: &[(Vec<f64>, f64)],
    cfg: &ValueFitConfig,
    seed: u64,
) -> Result<ValueFitReport> {
    if samples.is_empty() {
        return Err(Error::DimensionMismatch("no value samples".into()));
    }
    let subsampled: Vec<&(Vec<f64>, f64)>;
    let used: &[&(Vec<f64>, f64)] = if cfg.sample_cap > 0 && samples.len() > cfg.sample_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cfg.sample_cap);
        idx.sort_unstable(); // fixed order for deterministic accumulation
        subsampled = idx.into_iter().map(|i| &samples[i]).collect();
        &subsampled
    } else {
        subsampled = samples.iter().collect();
        &subsampled
    };
    let inputs: Vec<Vec<f64>> = used.iter().map(|(o, _)| o.clone()).collect();
    let targets: Vec<f64> = used.iter().map(|(_, t)| *t).collect();
    let huber = HuberSpec {
        delta: cfg.huber_delta,
    };

    let n_params = value.param_count();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut loss = value.batch_loss(&inputs, &targets, huber)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("initial value loss {loss}")));
    }
    let mut backtracks = 0;
    let mut iterations = 0;
    for it in 0..cfg.max_iterations {
        iterations = it + 1;
        if loss < cfg.loss_threshold {
            break;
        }
        let grad = value.loss_gradient(&inputs, &targets, huber)?.0;
        for ((mi, vi), g) in m.iter_mut().zip(v.iter_mut()).zip(&grad) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
        }
        let t = (it + 1) as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let direction: Vec<f64> = m
            .iter()
            .zip(&v)
            .map(|(mi, vi)| (mi / bias1) / ((vi / bias2).sqrt() + eps))
            .collect();

        let base = value.flatten().0;
        let mut step = cfg.step_size;
        let mut accepted = false;
        for _ in 0..12 {
            value.unflatten(&base)?;
            value.add_scaled(&direction, -step)?;
            let new_loss = value.batch_loss(&inputs, &targets, huber)?;
            if !new_loss.is_finite() {
                return Err(Error::Divergence(format!("value loss became {new_loss}")));
            }
            if new_loss <= loss {
                loss = new_loss;
                accepted = true;
                break;
            }
            backtracks += 1;
            step *= 0.5;
        }
        if !accepted {
            // No improving step at any tried scale; keep the old weights.
            value.unflatten(&base)?;
        }
    }
    Ok(ValueFitReport {
        final_loss: loss,
        iterations,
        backtracks,
    })
}
