//! Run configuration: every tunable of every subsystem in one TOML
//! document, with defaults matching the published vehicle and training
//! constants where they exist. The resolved configuration is written next
//! to a run's outputs so any result can be reproduced from its directory.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::env::TaskConfig;
use crate::optim::PolicyOptConfig;
use crate::rollout::RolloutConfig;
use crate::sim::{PdGains, QuadParams};
use crate::value::ValueFitConfig;
use crate::{Error, Result};

/// Training-loop controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainLoopConfig {
    pub iterations: usize,
    /// Fresh on-policy rollouts for the per-iteration evaluation.
    pub eval_rollouts: usize,
    pub eval_steps: usize,
    /// Stop when the evaluation cost improved by less than
    /// `plateau_tolerance` (relative) over this many iterations; 0 disables.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            eval_rollouts: 10,
            eval_steps: 600,
            plateau_window: 0,
            plateau_tolerance: 0.01,
        }
    }
}

/// Evaluation-suite controls (recovery and waypoint tests).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rollouts for the recovery failure-rate test.
    pub recovery_rollouts: usize,
    /// Start altitude for recovery rollouts, m. The evaluation ground
    /// plane sits at z = 0; touching it counts as a failure.
    pub start_altitude: f64,
    pub episode_steps: usize,
    /// Seconds to dwell at each vertex of the waypoint square.
    pub waypoint_dwell: f64,
    /// Side length of the waypoint square, m.
    pub waypoint_side: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            recovery_rollouts: 100,
            start_altitude: 2.0,
            episode_steps: 600,
            waypoint_dwell: 4.0,
            waypoint_side: 1.0,
        }
    }
}

/// The complete, serializable run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub quad: QuadParams,
    pub pd: PdGains,
    pub task: TaskConfig,
    pub rollout: RolloutConfig,
    pub value: ValueFitConfig,
    pub policy: PolicyOptConfig,
    pub train: TrainLoopConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.quad.validate()?;
        let c = &self.task.cost;
        if !(0.0..1.0).contains(&c.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0,1)", c.gamma)));
        }
        if c.position < 0.0 || c.action < 0.0 || c.angular_velocity < 0.0 || c.velocity < 0.0 {
            return Err(Error::Config("cost weights must be non-negative".into()));
        }
        if self.rollout.noise.sigma <= 0.0 {
            return Err(Error::Config("exploration noise sigma must be positive".into()));
        }
        if self.rollout.noise.depth == 0 {
            return Err(Error::Config("noise depth must be at least 1".into()));
        }
        if self.policy.alpha <= 0.0 || self.policy.delta <= 0.0 {
            return Err(Error::Config("alpha and delta must be positive".into()));
        }
        if self.value.loss_threshold <= 0.0 || self.value.max_iterations == 0 {
            return Err(Error::Config(
                "value fit needs a positive loss threshold and at least one iteration".into(),
            ));
        }
        Ok(())
    }

    /// Desk-scale configuration for fast smoke training.
    pub fn smoke(seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            ..Default::default()
        };
        cfg.rollout.n_initial = 8;
        cfg.rollout.initial_steps = 100;
        cfg.rollout.n_branch = 16;
        cfg.rollout.branch_steps = 100;
        cfg.train.iterations = 20;
        // Ten evaluation rollouts have a standard error larger than the
        // total improvement achievable at this scale; average more.
        cfg.train.eval_rollouts = 50;
        cfg.value.max_iterations = 60;
        cfg.value.sample_cap = 4000;
        cfg.value.step_size = 0.01;
        // With so few junction pairs per iteration the published step size
        // barely moves the policy; let the trust region set the step and
        // explore more aggressively.
        cfg.rollout.noise.sigma = 1.0;
        cfg.policy.alpha = 1e6;
        cfg.policy.delta = 10.0;
        // Start from a randomized output layer rather than exactly at the
        // PD stub: the stub is close to a local optimum at this tiny data
        // scale, leaving nothing measurable to learn in 20 iterations.
        cfg.policy.init_scale = 4.0;
        cfg
    }
}
