//! The learning task around the simulator: observation construction, the
//! running cost, random initial states and the composite thrust command
//! (hover bias + attitude PD + policy output).
//!
//! The policy is always trained to fly to the origin; waypoint tracking is
//! done at run time by subtracting the waypoint from the position before
//! building the observation, so the cost function itself never moves.

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::sim::{self, PdGains, QuadParams, QuadState, ThrustCommand};
use crate::{Error, Result};

/// Observation dimension: 9 rotation entries + 3 position + 3 velocity +
/// 3 angular velocity.
pub const OBS_DIM: usize = 18;
/// Action dimension: per-rotor thrust deviations.
pub const ACTION_DIM: usize = 4;

/// Cost coefficients and discount.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub position: f64,
    pub action: f64,
    pub angular_velocity: f64,
    pub velocity: f64,
    pub gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            position: 4e-3,
            action: 2e-4,
            angular_velocity: 3e-4,
            velocity: 5e-4,
            gamma: 0.99,
        }
    }
}

/// Observation scaling so bounded initial states land roughly in [-1, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObsScales {
    pub position: f64,
    pub velocity: f64,
    pub angular_velocity: f64,
}

impl Default for ObsScales {
    fn default() -> Self {
        Self {
            position: 0.5,
            velocity: 0.25,
            angular_velocity: 0.15,
        }
    }
}

/// Bounds of the random initial-state distribution. Orientation is always
/// uniform over SO(3).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitDistribution {
    pub position_bound: f64,
    pub velocity_bound: f64,
    pub angular_velocity_bound: f64,
}

impl Default for InitDistribution {
    fn default() -> Self {
        Self {
            position_bound: 1.0,
            velocity_bound: 1.0,
            angular_velocity_bound: 1.0,
        }
    }
}

/// Everything the task wrapper needs besides the simulator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub cost: CostWeights,
    pub scales: ObsScales,
    pub init: InitDistribution,
    /// Newtons of thrust deviation per unit of network output.
    pub action_scale: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            cost: CostWeights::default(),
            scales: ObsScales::default(),
            init: InitDistribution::default(),
            action_scale: 1.0,
        }
    }
}

/// 18-dim network input for a state relative to a waypoint.
pub fn observe(state: &QuadState, waypoint: &Vector3<f64>, scales: &ObsScales) -> Vec<f64> {
    let mut obs = Vec::with_capacity(OBS_DIM);
    // Rotation entries row-major, unscaled.
    for r in 0..3 {
        for c in 0..3 {
            obs.push(state.rotation[(r, c)]);
        }
    }
    let rel = (state.position - waypoint) * scales.position;
    obs.extend_from_slice(&[rel.x, rel.y, rel.z]);
    let v = state.velocity * scales.velocity;
    obs.extend_from_slice(&[v.x, v.y, v.z]);
    let w = state.angular_velocity * scales.angular_velocity;
    obs.extend_from_slice(&[w.x, w.y, w.z]);
    obs
}

/// Per-step cost. `action` is the commanded thrust deviation from the hover
/// bias, so undisturbed hover at the origin costs exactly zero.
pub fn cost(state: &QuadState, action: &Vector4<f64>, weights: &CostWeights) -> f64 {
    weights.position * state.position.norm()
        + weights.action * action.norm()
        + weights.angular_velocity * state.angular_velocity.norm()
        + weights.velocity * state.velocity.norm()
}

/// Uniformly random rotation matrix (uniform on SO(3) via a normalized
/// Gaussian quaternion, which is uniform on S^3).
pub fn random_rotation<R: Rng>(rng: &mut R) -> nalgebra::Matrix3<f64> {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n < 1e-6 {
            continue;
        }
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        return nalgebra::Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
    }
}

/// Draw a random initial state: componentwise-uniform twist and position,
/// uniform orientation.
pub fn sample_initial<R: Rng>(dist: &InitDistribution, rng: &mut R) -> QuadState {
    let uniform = |rng: &mut R, b: f64| {
        if b == 0.0 {
            Vector3::zeros()
        } else {
            Vector3::new(
                rng.gen_range(-b..=b),
                rng.gen_range(-b..=b),
                rng.gen_range(-b..=b),
            )
        }
    };
    QuadState {
        position: uniform(rng, dist.position_bound),
        rotation: random_rotation(rng),
        velocity: uniform(rng, dist.velocity_bound),
        angular_velocity: uniform(rng, dist.angular_velocity_bound),
    }
}

/// Compose the full rotor command for a policy output: hover bias plus the
/// PD torque mapped through the allocation inverse plus the scaled policy
/// deviation, then thresholded to non-negative thrust.
///
/// Returns the final command and the pre-bias deviation that feeds the cost
/// (command minus hover bias, after thresholding).
pub fn act(
    policy_out: &[f64],
    state: &QuadState,
    params: &QuadParams,
    gains: &PdGains,
    action_scale: f64,
) -> Result<(ThrustCommand, Vector4<f64>)> {
    if policy_out.len() != ACTION_DIM {
        return Err(Error::DimensionMismatch(format!(
            "policy output length {} != {ACTION_DIM}",
            policy_out.len()
        )));
    }
    let bias = Vector4::repeat(params.hover_thrust());
    let tau = sim::pd_attitude(state, gains);
    let pd = params.thrusts_for_wrench(0.0, &tau);
    let policy = Vector4::new(policy_out[0], policy_out[1], policy_out[2], policy_out[3])
        * action_scale;
    let cmd = sim::threshold(&(bias + pd + policy))?;
    Ok((cmd, cmd.0 - bias))
}
