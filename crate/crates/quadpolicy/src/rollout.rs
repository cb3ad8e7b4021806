//! Exploration rollouts.
//!
//! Each learning iteration simulates three kinds of trajectories: on-policy
//! initial trajectories from random starts, short junction segments driven
//! by Gaussian-perturbed actions, and on-policy branch trajectories that
//! continue from the junctions. The junction/branch contrast yields one
//! advantage sample per branch; the on-policy states yield Monte-Carlo
//! value targets.
//!
//! All active simulations advance one step at a time so the policy network
//! is evaluated on a batch of states per step. Randomness is drawn from
//! per-trajectory ChaCha streams keyed by (seed, trajectory index), so
//! results are bitwise reproducible regardless of thread scheduling.

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{self, TaskConfig};
use crate::mlp::Mlp;
use crate::sim::{self, PdGains, QuadParams, QuadState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Initial,
    /// Perturbed junction steps followed by the on-policy branch; the first
    /// `noise_depth` actions are off-policy.
    Branch,
}

/// One simulated trajectory. `actions` are policy-space actions (network
/// output units, perturbed where applicable); `costs[i]` is the running
/// cost at `states[i]` under `actions[i]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub states: Vec<QuadState>,
    /// Observation at each pre-action state; same length as `actions`.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vector4<f64>>,
    pub costs: Vec<f64>,
    /// (initial trajectory index, step index) for branches.
    pub parent: Option<(usize, usize)>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    fn check_invariants(&self) {
        debug_assert_eq!(self.actions.len(), self.costs.len());
        debug_assert_eq!(self.observations.len(), self.costs.len());
        debug_assert_eq!(self.states.len(), self.costs.len() + 1);
    }
}

/// Exploration noise: isotropic Gaussian with standard deviation `sigma`
/// per action component (covariance `sigma^2 I`), applied for `depth`
/// consecutive steps at each junction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub depth: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma: 0.33,
            depth: 2,
        }
    }
}

/// The advantage sample extracted from one junction/branch pair.
#[derive(Debug, Clone)]
pub struct JunctionPair {
    /// Observation at the junction state.
    pub observation: Vec<f64>,
    /// On-policy action the policy would have taken there.
    pub on_policy_action: Vector4<f64>,
    /// Perturbed action actually taken.
    pub perturbed_action: Vector4<f64>,
    /// Cost incurred by the perturbed action.
    pub cost: f64,
    /// Monte-Carlo value of the continuation after the perturbed action.
    pub value_next: f64,
    /// Monte-Carlo value of the on-policy continuation at the junction.
    pub value_on_policy: f64,
}

/// Rollout counts per learning iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub n_initial: usize,
    pub initial_steps: usize,
    pub n_branch: usize,
    pub branch_steps: usize,
    pub noise: NoiseSpec,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        // 512*600 + 1024*(2+600) steps, about one million per iteration.
        Self {
            n_initial: 512,
            initial_steps: 600,
            n_branch: 1024,
            branch_steps: 600,
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RolloutStats {
    pub total_steps: usize,
    pub diverged: usize,
    pub mean_cost: f64,
}

/// Everything one exploration phase produces.
#[derive(Debug)]
pub struct IterationSamples {
    /// (observation, Monte-Carlo value target) for every on-policy state.
    pub value_samples: Vec<(Vec<f64>, f64)>,
    pub pairs: Vec<JunctionPair>,
    pub initial: Vec<Trajectory>,
    pub branches: Vec<Trajectory>,
    pub stats: RolloutStats,
}

/// Backward recursion of the discounted Monte-Carlo values: one value per
/// state, seeded with the terminal bootstrap.
pub fn mc_values_from_costs(costs: &[f64], terminal_value: f64, gamma: f64) -> Vec<f64> {
    let mut values = vec![0.0; costs.len() + 1];
    values[costs.len()] = terminal_value;
    for i in (0..costs.len()).rev() {
        values[i] = costs[i] + gamma * values[i + 1];
    }
    values
}

/// Monte-Carlo values for a trajectory, bootstrapping the terminal value
/// from the value network.
pub fn mc_values(
    traj: &Trajectory,
    value: &Mlp,
    task: &TaskConfig,
    gamma: f64,
) -> Result<Vec<f64>> {
    if traj.states.is_empty() {
        return Err(Error::DimensionMismatch("empty trajectory".into()));
    }
    let terminal_obs = env::observe(traj.states.last().unwrap(), &Vector3::zeros(), &task.scales);
    let terminal = value.forward(&terminal_obs)?[0];
    Ok(mc_values_from_costs(&traj.costs, terminal, gamma))
}

struct Lane {
    traj: Trajectory,
    rng: ChaCha8Rng,
    active: bool,
}

impl Lane {
    fn new(kind: TrajectoryKind, start: QuadState, rng: ChaCha8Rng) -> Self {
        Self {
            traj: Trajectory {
                kind,
                states: vec![start],
                observations: Vec::new(),
                actions: Vec::new(),
                costs: Vec::new(),
                parent: None,
                diverged: false,
            },
            rng,
            active: true,
        }
    }

    fn current(&self) -> &QuadState {
        self.traj.states.last().unwrap()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Advance every active lane by `steps` synchronized steps. Lanes whose
/// index is below `noisy_until_step` thresholds... see `perturb`: when
/// `perturb(step)` is true, actions get Gaussian noise from the lane RNG.
fn advance_lanes(
    lanes: &mut [Lane],
    policy: &Mlp,
    quad: &QuadParams,
    gains: &PdGains,
    task: &TaskConfig,
    steps: usize,
    sigma: f64,
    perturb: impl Fn(usize) -> bool,
) -> Result<()> {
    for step_idx in 0..steps {
        let active: Vec<usize> = (0..lanes.len()).filter(|&i| lanes[i].active).collect();
        if active.is_empty() {
            break;
        }
        let obs_batch: Vec<Vec<f64>> = active
            .iter()
            .map(|&i| env::observe(lanes[i].current(), &Vector3::zeros(), &task.scales))
            .collect();
        let outputs = policy.batch_forward(&obs_batch)?;
        for (slot, &i) in active.iter().enumerate() {
            let lane = &mut lanes[i];
            let out = &outputs[slot];
            let mut action = Vector4::new(out[0], out[1], out[2], out[3]);
            if perturb(step_idx) {
                loop {
                    let noise = Vector4::from_fn(|_, _| {
                        sigma * lane.rng.sample::<f64, _>(StandardNormal)
                    });
                    if noise.norm() > 0.0 {
                        action += noise;
                        break;
                    }
                    // Measure-zero tie: resample.
                }
            }
            let state = lane.current().clone();
            let step_result = env::act(action.as_slice(), &state, quad, gains, task.action_scale)
                .and_then(|(cmd, deviation)| {
                    let c = env::cost(&state, &deviation, &task.cost);
                    sim::step(&state, &cmd, quad).map(|next| (next, c))
                });
            match step_result {
                Ok((next, c)) => {
                    lane.traj.observations.push(obs_batch[slot].clone());
                    lane.traj.actions.push(action);
                    lane.traj.costs.push(c);
                    lane.traj.states.push(next);
                }
                Err(Error::Divergence(_)) => {
                    lane.traj.diverged = true;
                    lane.active = false;
                }
                Err(e) => return Err(e),
            }
        }
    }
    for lane in lanes.iter() {
        lane.traj.check_invariants();
    }
    Ok(())
}

/// One full exploration phase: initial trajectories, junction perturbation,
/// branch continuations, Monte-Carlo targets and junction pairs.
pub fn run_iteration(
    policy: &Mlp,
    value: &Mlp,
    quad: &QuadParams,
    gains: &PdGains,
    task: &TaskConfig,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<IterationSamples> {
    if cfg.n_initial == 0 || cfg.initial_steps == 0 {
        return Err(Error::Config("rollout needs at least one initial trajectory".into()));
    }
    let gamma = task.cost.gamma;

    // Phase 1: on-policy initial trajectories.
    let mut initial_lanes: Vec<Lane> = (0..cfg.n_initial)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let start = env::sample_initial(&task.init, &mut rng);
            Lane::new(TrajectoryKind::Initial, start, rng)
        })
        .collect();
    advance_lanes(
        &mut initial_lanes,
        policy,
        quad,
        gains,
        task,
        cfg.initial_steps,
        0.0,
        |_| false,
    )?;
    let initial: Vec<Trajectory> = initial_lanes.into_iter().map(|l| l.traj).collect();
    let initial_values: Vec<Vec<f64>> = initial
        .iter()
        .map(|t| mc_values(t, value, task, gamma))
        .collect::<Result<_>>()?;

    // Phase 2: pick junction sites uniformly over all recorded pre-action
    // states of the initial trajectories.
    let mut site_rng = stream_rng(seed, u64::MAX);
    let site_pool: Vec<(usize, usize)> = initial
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |s| (i, s)))
        .collect();
    if site_pool.is_empty() {
        return Err(Error::Divergence("all initial trajectories diverged at once".into()));
    }
    let sites: Vec<(usize, usize)> = (0..cfg.n_branch)
        .map(|_| site_pool[site_rng.gen_range(0..site_pool.len())])
        .collect();

    // Phase 3: junction + branch lanes, synchronized like phase 1. The
    // first `noise.depth` steps carry the perturbation.
    let mut branch_lanes: Vec<Lane> = sites
        .iter()
        .enumerate()
        .map(|(b, &(i, s))| {
            let rng = stream_rng(seed, cfg.n_initial as u64 + b as u64);
            let mut lane = Lane::new(TrajectoryKind::Branch, initial[i].states[s].clone(), rng);
            lane.traj.parent = Some((i, s));
            lane
        })
        .collect();
    let depth = cfg.noise.depth.max(1);
    advance_lanes(
        &mut branch_lanes,
        policy,
        quad,
        gains,
        task,
        depth + cfg.branch_steps,
        cfg.noise.sigma,
        |step| step < depth,
    )?;
    let branches: Vec<Trajectory> = branch_lanes.into_iter().map(|l| l.traj).collect();

    // Assemble value targets and junction pairs.
    let mut value_samples = Vec::new();
    for (traj, values) in initial.iter().zip(&initial_values) {
        for i in 0..traj.len() {
            value_samples.push((traj.observations[i].clone(), values[i]));
        }
    }

    let policy_at = |obs: &[f64]| -> Result<Vector4<f64>> {
        let out = policy.forward(obs)?;
        Ok(Vector4::new(out[0], out[1], out[2], out[3]))
    };

    // Both sides of the advantage are evaluated over the same horizon
    // h = min(branch length, parent remainder) and bootstrap with the value
    // network at the same depth. The bootstrap states stay close (the
    // branch diverges from the parent only through the perturbation), so
    // value-network errors largely cancel, and with zero noise the
    // advantage cancels exactly.
    let bootstrap = |state: &QuadState| -> Result<f64> {
        let obs = env::observe(state, &Vector3::zeros(), &task.scales);
        Ok(value.forward(&obs)?[0])
    };

    let mut pairs = Vec::with_capacity(cfg.n_branch);
    for branch in &branches {
        let (pi, ps) = branch.parent.unwrap();
        if branch.is_empty() {
            continue; // diverged on the very first perturbed step
        }
        let parent = &initial[pi];
        let h = branch.len().min(parent.len() - ps);
        let value_next = mc_values_from_costs(
            &branch.costs[1..h],
            bootstrap(&branch.states[h])?,
            gamma,
        )[0];
        let value_on_policy = mc_values_from_costs(
            &parent.costs[ps..ps + h],
            bootstrap(&parent.states[ps + h])?,
            gamma,
        )[0];
        let on_policy = policy_at(&branch.observations[0])?;
        pairs.push(JunctionPair {
            observation: branch.observations[0].clone(),
            on_policy_action: on_policy,
            perturbed_action: branch.actions[0],
            cost: branch.costs[0],
            value_next,
            value_on_policy,
        });
        // On-policy states of the branch segment feed the value fit too.
        let values = mc_values(branch, value, task, gamma)?;
        for i in depth..branch.len() {
            value_samples.push((branch.observations[i].clone(), values[i]));
        }
    }

    let total_steps: usize = initial.iter().map(Trajectory::len).sum::<usize>()
        + branches.iter().map(Trajectory::len).sum::<usize>();
    let diverged = initial.iter().filter(|t| t.diverged).count()
        + branches.iter().filter(|t| t.diverged).count();
    let cost_sum: f64 = initial.iter().flat_map(|t| &t.costs).sum::<f64>()
        + branches.iter().flat_map(|t| &t.costs).sum::<f64>();
    let stats = RolloutStats {
        total_steps,
        diverged,
        mean_cost: if total_steps > 0 {
            cost_sum / total_steps as f64
        } else {
            0.0
        },
    };

    Ok(IterationSamples {
        value_samples,
        pairs,
        initial,
        branches,
        stats,
    })
}

/// Single on-policy episode from a given start state. `policy = None` runs
/// the PD controller and hover bias alone. The observation is built
/// relative to `waypoint`; the recorded cost keeps its definition at the
/// training origin.
pub fn run_episode_to(
    policy: Option<&Mlp>,
    start: QuadState,
    waypoint: &Vector3<f64>,
    steps: usize,
    quad: &QuadParams,
    gains: &PdGains,
    task: &TaskConfig,
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        kind: TrajectoryKind::Initial,
        states: vec![start],
        observations: Vec::new(),
        actions: Vec::new(),
        costs: Vec::new(),
        parent: None,
        diverged: false,
    };
    for _ in 0..steps {
        let state = traj.states.last().unwrap().clone();
        let obs = env::observe(&state, waypoint, &task.scales);
        let out = match policy {
            Some(net) => net.forward(&obs)?,
            None => vec![0.0; env::ACTION_DIM],
        };
        let action = Vector4::new(out[0], out[1], out[2], out[3]);
        let step_result = env::act(&out, &state, quad, gains, task.action_scale).and_then(
            |(cmd, deviation)| {
                let c = env::cost(&state, &deviation, &task.cost);
                sim::step(&state, &cmd, quad).map(|next| (next, c))
            },
        );
        match step_result {
            Ok((next, c)) => {
                traj.observations.push(obs);
                traj.actions.push(action);
                traj.costs.push(c);
                traj.states.push(next);
            }
            Err(Error::Divergence(_)) => {
                traj.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    traj.check_invariants();
    Ok(traj)
}

/// [`run_episode_to`] with the waypoint at the training origin.
pub fn run_episode(
    policy: Option<&Mlp>,
    start: QuadState,
    steps: usize,
    quad: &QuadParams,
    gains: &PdGains,
    task: &TaskConfig,
) -> Result<Trajectory> {
    run_episode_to(policy, start, &Vector3::zeros(), steps, quad, gains, task)
}

/// Plain discounted cost sum of an episode (no terminal bootstrap).
pub fn discounted_return(traj: &Trajectory, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for c in &traj.costs {
        total += discount * c;
        discount *= gamma;
    }
    total
}
