//! Evaluation suites and microbenchmarks: recovery failure rate, waypoint
//! tracking, policy inference latency and the natural-gradient solver
//! comparison.
//!
//! Evaluation introduces a ground plane at z = 0 that training does not
//! have: a recovery rollout fails if the vehicle's altitude reaches zero at
//! any step (a simulator divergence mid-flight counts as a failure too).

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::config::RunConfig;
use crate::env;
use crate::mlp::Mlp;
use crate::optim;
use crate::rollout::{self, Trajectory};
use crate::sim::QuadState;
use crate::Result;

/// Recovery-test outcome.
#[derive(Debug, Clone, Copy)]
pub struct RecoveryReport {
    pub rollouts: usize,
    pub failures: usize,
    pub diverged: usize,
}

impl RecoveryReport {
    pub fn failure_rate(&self) -> f64 {
        if self.rollouts == 0 {
            0.0
        } else {
            self.failures as f64 / self.rollouts as f64
        }
    }
}

/// Waypoint-tracking outcome. Errors are distances to the active waypoint,
/// in meters; the steady-state error averages the final quarter of each
/// dwell period.
#[derive(Debug, Clone, Copy)]
pub struct WaypointReport {
    pub mean_tracking_error: f64,
    pub max_tracking_error: f64,
    pub steady_state_error: f64,
    pub steps: usize,
}

/// Random start for a recovery rollout: orientation uniform on SO(3),
/// position/velocity/angular velocity componentwise uniform in [-1, 1],
/// shifted up to the start altitude.
pub fn recovery_start<R: Rng>(altitude: f64, rng: &mut R) -> QuadState {
    let dist = env::InitDistribution {
        position_bound: 1.0,
        velocity_bound: 1.0,
        angular_velocity_bound: 1.0,
    };
    let mut state = env::sample_initial(&dist, rng);
    state.position.z += altitude;
    state
}

/// Run `rollouts` recovery episodes with the target hovering point above
/// the origin at the start altitude. `policy = None` evaluates the PD
/// controller and hover bias alone.
pub fn evaluate_recovery(
    policy: Option<&Mlp>,
    cfg: &RunConfig,
    rollouts: usize,
    seed: u64,
) -> Result<RecoveryReport> {
    let altitude = cfg.eval.start_altitude;
    let waypoint = Vector3::new(0.0, 0.0, altitude);
    let mut failures = 0;
    let mut diverged = 0;
    for i in 0..rollouts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let start = recovery_start(altitude, &mut rng);
        let traj = rollout::run_episode_to(
            policy,
            start,
            &waypoint,
            cfg.eval.episode_steps,
            &cfg.quad,
            &cfg.pd,
            &cfg.task,
        )?;
        let touched = traj.states.iter().any(|s| s.position.z <= 0.0);
        if touched || traj.diverged {
            failures += 1;
        }
        if traj.diverged {
            diverged += 1;
        }
    }
    Ok(RecoveryReport {
        rollouts,
        failures,
        diverged,
    })
}

/// Cycle the four vertices of a square at the start altitude, dwelling at
/// each, and measure tracking errors. Returns the report and the flown
/// trajectory (for CSV export).
pub fn evaluate_waypoints(policy: &Mlp, cfg: &RunConfig) -> Result<(WaypointReport, Trajectory)> {
    let h = cfg.eval.start_altitude;
    let side = cfg.eval.waypoint_side;
    let vertices = [
        Vector3::new(0.0, 0.0, h),
        Vector3::new(side, 0.0, h),
        Vector3::new(side, side, h),
        Vector3::new(0.0, side, h),
    ];
    let dwell_steps = ((cfg.eval.waypoint_dwell / cfg.quad.dt).round() as usize).max(1);
    let mut state = QuadState::hover();
    state.position = vertices[0];

    let mut full = Trajectory {
        kind: rollout::TrajectoryKind::Initial,
        states: vec![state.clone()],
        observations: Vec::new(),
        actions: Vec::new(),
        costs: Vec::new(),
        parent: None,
        diverged: false,
    };
    let mut errors = Vec::new();
    let mut steady = Vec::new();
    for (leg, waypoint) in vertices.iter().cycle().take(2 * vertices.len()).enumerate() {
        let start = full.states.last().unwrap().clone();
        let traj = rollout::run_episode_to(
            Some(policy),
            start,
            waypoint,
            dwell_steps,
            &cfg.quad,
            &cfg.pd,
            &cfg.task,
        )?;
        for (i, s) in traj.states.iter().enumerate().skip(1) {
            let e = (s.position - waypoint).norm();
            errors.push(e);
            if leg > 0 && i >= dwell_steps - dwell_steps / 4 {
                steady.push(e);
            }
        }
        full.diverged |= traj.diverged;
        full.observations.extend(traj.observations);
        full.actions.extend(traj.actions);
        full.costs.extend(traj.costs);
        full.states.extend(traj.states.into_iter().skip(1));
        if full.diverged {
            break;
        }
    }
    let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    let max = errors.iter().cloned().fold(0.0f64, f64::max);
    let ss = steady.iter().sum::<f64>() / steady.len().max(1) as f64;
    Ok((
        WaypointReport {
            mean_tracking_error: mean,
            max_tracking_error: max,
            steady_state_error: ss,
            steps: errors.len(),
        },
        full,
    ))
}

/// Dump a trajectory as CSV: time, position, rotation row-major, velocity,
/// angular velocity, and the four rotor thrusts recomputed from the
/// recorded policy actions.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, cfg: &RunConfig) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "t,px,py,pz,r11,r12,r13,r21,r22,r23,r31,r32,r33,vx,vy,vz,wx,wy,wz,t1,t2,t3,t4"
    )?;
    for (i, action) in traj.actions.iter().enumerate() {
        let s = &traj.states[i];
        let (cmd, _) = env::act(
            action.as_slice(),
            s,
            &cfg.quad,
            &cfg.pd,
            cfg.task.action_scale,
        )?;
        let t = i as f64 * cfg.quad.dt;
        let r = &s.rotation;
        writeln!(
            w,
            "{t},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.position.x,
            s.position.y,
            s.position.z,
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            s.velocity.x,
            s.velocity.y,
            s.velocity.z,
            s.angular_velocity.x,
            s.angular_velocity.y,
            s.angular_velocity.z,
            cmd.0[0],
            cmd.0[1],
            cmd.0[2],
            cmd.0[3],
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct LatencyReport {
    pub repetitions: usize,
    pub median_us: f64,
    pub p99_us: f64,
}

/// Time single-observation policy evaluation. Runs on the calling thread
/// only, matching a single-core deployment.
pub fn bench_inference(policy: &Mlp, repetitions: usize) -> Result<LatencyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs: Vec<f64> = (0..policy.input_dim())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    // Warm-up.
    let mut sink = 0.0;
    for _ in 0..1000 {
        sink += policy.forward(&obs)?[0];
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        sink += policy.forward(&obs)?[0];
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    std::hint::black_box(sink);
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(LatencyReport {
        repetitions,
        median_us: samples[repetitions / 2],
        p99_us: samples[((repetitions as f64 * 0.99) as usize).min(repetitions - 1)],
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SolverBenchReport {
    pub svd_ms_per_sample: f64,
    pub cg_ms_per_sample: f64,
    pub svd_residual: f64,
    pub cg_residual: f64,
    pub solution_difference: f64,
}

/// Compare the SVD and conjugate-gradient natural-gradient solvers on
/// policy-sized problems (4 x 5636 Jacobians). Residuals are relative:
/// `||H n - g|| / ||g||` evaluated matrix-free.
pub fn bench_solver(samples: usize, sigma: f64, seed: u64) -> Result<SolverBenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = 5636;
    let d_aa = DMatrix::identity(4, 4) / (sigma * sigma);
    let mut svd_time = 0.0;
    let mut cg_time = 0.0;
    let mut svd_res = 0.0f64;
    let mut cg_res = 0.0f64;
    let mut diff = 0.0f64;
    for _ in 0..samples {
        let j = DMatrix::from_fn(4, p, |_, _| rng.gen_range(-0.5..0.5));
        let g_a = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let t = Instant::now();
        let svd = optim::natural_gradient_svd(&j, &d_aa, &g_a)?;
        svd_time += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let cg = optim::natural_gradient_cg(&j, &d_aa, &g_a, 10)?;
        cg_time += t.elapsed().as_secs_f64();
        let residual = |n: &DVector<f64>, g: &DVector<f64>| {
            let hn = j.transpose() * (&d_aa * (&j * n));
            (hn - g).norm() / g.norm().max(f64::MIN_POSITIVE)
        };
        svd_res = svd_res.max(residual(&svd.natural_grad, &svd.grad));
        cg_res = cg_res.max(residual(&cg.natural_grad, &cg.grad));
        diff = diff.max(
            (&svd.natural_grad - &cg.natural_grad).norm()
                / svd.natural_grad.norm().max(f64::MIN_POSITIVE),
        );
    }
    Ok(SolverBenchReport {
        svd_ms_per_sample: svd_time / samples as f64 * 1e3,
        cg_ms_per_sample: cg_time / samples as f64 * 1e3,
        svd_residual: svd_res,
        cg_residual: cg_res,
        solution_difference: diff,
    })
}
