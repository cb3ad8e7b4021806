//! Deterministic per-sample natural-gradient policy optimization.
//!
//! Each junction pair contributes one per-sample gradient
//! `g_k = J^T g_a` with `g_a = A * delta / ||delta||^2`, and one natural
//! gradient `n_k` solving `H n_k = g_k` for the Mahalanobis-metric Hessian
//! `H = J^T D_aa J` pulled back through the policy Jacobian `J`. `H` is
//! rank-deficient in parameter space, but `g_k` lies in its support, so the
//! pseudoinverse solution is exact. It is computed without ever forming the
//! parameter-space Hessian: with `L` the Cholesky factor of `D_aa` and the
//! thin SVD `L^T J = U S V^T`, the solution is `n = V S^-2 V^T g`.
//!
//! A matrix-free conjugate-gradient solver is kept alongside for
//! comparison; the Hessian has rank at most the action dimension, so CG
//! converges in a handful of iterations on well-conditioned metrics.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::config::RunConfig;
use crate::env;
use crate::mlp::Mlp;
use crate::rollout::{self, JunctionPair};
use crate::value;
use crate::{Error, Result};

/// Relative singular-value cutoff for the pseudoinverse.
const RANK_TOL: f64 = 1e-12;
/// Perturbations shorter than this give unusably large gradient estimates.
const DEGENERATE_TOL: f64 = 1e-12;
/// Strict-inequality margin for the trust-region scaling.
const TRUST_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Svd,
    ConjugateGradient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyOptConfig {
    /// Step size applied to the averaged natural gradient.
    pub alpha: f64,
    /// Trust region: per-sample cap on the squared Mahalanobis length of
    /// the applied update.
    pub delta: f64,
    /// Scale of the random output-layer initialization. Zero starts the
    /// policy exactly at the hover-bias + PD stub; training starts from a
    /// genuinely random controller when positive.
    pub init_scale: f64,
    pub solver: Solver,
    pub cg_iterations: usize,
}

impl Default for PolicyOptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            delta: 0.1,
            init_scale: 1.0,
            solver: Solver::Svd,
            cg_iterations: 10,
        }
    }
}

/// Advantage of the perturbed action over the on-policy continuation.
pub fn advantage(pair: &JunctionPair, gamma: f64) -> f64 {
    pair.cost + gamma * pair.value_next - pair.value_on_policy
}

/// Linear two-point model of the advantage slope in action space:
/// `A * delta / ||delta||^2`.
pub fn action_gradient(pair: &JunctionPair, adv: f64) -> Result<DVector<f64>> {
    let delta = pair.perturbed_action - pair.on_policy_action;
    let norm_sq = delta.norm_squared();
    if norm_sq.sqrt() < DEGENERATE_TOL {
        return Err(Error::DegeneratePair(norm_sq.sqrt()));
    }
    Ok(DVector::from_iterator(4, delta.iter().map(|d| adv * d / norm_sq)))
}

/// One solved per-sample natural gradient.
#[derive(Debug, Clone)]
pub struct NaturalGradientResult {
    /// `n_k` solving `H n_k = g_k`.
    pub natural_grad: DVector<f64>,
    /// The raw parameter-space gradient `g_k = J^T g_a`.
    pub grad: DVector<f64>,
    /// `n_k^T H n_k`, evaluated as `n_k . g_k` (exact when `H n = g`).
    pub mahalanobis_sq: f64,
    /// Numerical rank of the metric factor; below the action dimension a
    /// rank-deficiency was encountered and the pseudoinverse proceeded
    /// over the numerical rank.
    pub rank: usize,
}

fn check_problem(j: &DMatrix<f64>, d_aa: &DMatrix<f64>, g_a: &DVector<f64>) -> Result<()> {
    let m = j.nrows();
    if d_aa.nrows() != m || d_aa.ncols() != m || g_a.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "jacobian {}x{} vs metric {}x{} vs gradient {}",
            j.nrows(),
            j.ncols(),
            d_aa.nrows(),
            d_aa.ncols(),
            g_a.len()
        )));
    }
    Ok(())
}

/// Exact pseudoinverse solve via the thin SVD of `L^T J`.
pub fn natural_gradient_svd(
    j: &DMatrix<f64>,
    d_aa: &DMatrix<f64>,
    g_a: &DVector<f64>,
) -> Result<NaturalGradientResult> {
    check_problem(j, d_aa, g_a)?;
    let chol = d_aa
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("action metric must be positive-definite".into()))?;
    let b = chol.l().transpose() * j;
    let svd = b.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let grad = j.transpose() * g_a;
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = RANK_TOL * sigma_max;
    let mut natural = DVector::zeros(j.ncols());
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff {
            continue;
        }
        rank += 1;
        let v_i = v_t.row(i).transpose();
        let coeff = v_i.dot(&grad) / (s * s);
        natural.axpy(coeff, &v_i, 1.0);
    }
    let mahalanobis_sq = natural.dot(&grad);
    Ok(NaturalGradientResult {
        natural_grad: natural,
        grad,
        mahalanobis_sq,
        rank,
    })
}

/// Matrix-free conjugate gradient on `H n = g` with Hessian-vector
/// products `v -> J^T (D_aa (J v))`.
pub fn natural_gradient_cg(
    j: &DMatrix<f64>,
    d_aa: &DMatrix<f64>,
    g_a: &DVector<f64>,
    iterations: usize,
) -> Result<NaturalGradientResult> {
    check_problem(j, d_aa, g_a)?;
    let grad = j.transpose() * g_a;
    let hv = |v: &DVector<f64>| -> DVector<f64> { j.transpose() * (d_aa * (j * v)) };
    let mut x = DVector::zeros(j.ncols());
    let mut r = grad.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let tol = 1e-14 * grad.norm_squared().max(f64::MIN_POSITIVE);
    for _ in 0..iterations {
        if rr <= tol {
            break;
        }
        let hp = hv(&p);
        let php = p.dot(&hp);
        if php <= 0.0 || !php.is_finite() {
            break;
        }
        let alpha = rr / php;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &hp, 1.0);
        let rr_new = r.norm_squared();
        let beta = rr_new / rr;
        p = &r + beta * &p;
        rr = rr_new;
    }
    let mahalanobis_sq = x.dot(&grad);
    Ok(NaturalGradientResult {
        natural_grad: x,
        grad,
        mahalanobis_sq,
        rank: j.nrows(),
    })
}

/// Statistics of one policy update.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    pub pair_count: usize,
    pub filtered_pairs: usize,
    pub mean_advantage: f64,
    /// The step size actually applied after trust-region scaling.
    pub alpha_applied: f64,
    pub max_mahalanobis_sq: f64,
}

/// One natural-gradient policy update from a batch of junction pairs.
///
/// A single global scaling `alpha' <= alpha` is chosen so the worst pair
/// satisfies the trust-region constraint, then
/// `theta <- theta - (alpha'/K) sum n_k`.
pub fn update_policy(
    policy: &mut Mlp,
    pairs: &[JunctionPair],
    cfg: &PolicyOptConfig,
    sigma: f64,
    gamma: f64,
) -> Result<UpdateStats> {
    if pairs.is_empty() {
        return Err(Error::NoUpdate);
    }
    let action_dim = env::ACTION_DIM;
    let d_aa = DMatrix::identity(action_dim, action_dim) / (sigma * sigma);

    let solved: Vec<Option<(DVector<f64>, f64, f64)>> = pairs
        .par_iter()
        .map(|pair| {
            let adv = advantage(pair, gamma);
            let g_a = match action_gradient(pair, adv) {
                Ok(g) => g,
                Err(_) => return None,
            };
            let jac = policy.output_jacobian(&pair.observation).ok()?;
            let result = match cfg.solver {
                Solver::Svd => natural_gradient_svd(&jac, &d_aa, &g_a),
                Solver::ConjugateGradient => {
                    natural_gradient_cg(&jac, &d_aa, &g_a, cfg.cg_iterations)
                }
            }
            .ok()?;
            if result.natural_grad.iter().any(|v| !v.is_finite()) {
                return None;
            }
            Some((result.natural_grad, result.mahalanobis_sq, adv))
        })
        .collect();

    let filtered = solved.iter().filter(|s| s.is_none()).count();
    let kept: Vec<&(DVector<f64>, f64, f64)> = solved.iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::NoUpdate);
    }
    let k = kept.len() as f64;
    let mut sum = DVector::zeros(policy.param_count());
    let mut max_mah = 0.0f64;
    let mut adv_sum = 0.0;
    for (n, mah, adv) in kept.iter() {
        sum += n;
        max_mah = max_mah.max(*mah);
        adv_sum += adv;
    }
    let alpha_applied = if max_mah > 0.0 {
        cfg.alpha
            .min((cfg.delta / max_mah).sqrt() * (1.0 - TRUST_MARGIN))
    } else {
        cfg.alpha
    };
    policy.add_scaled(sum.as_slice(), -alpha_applied / k)?;
    Ok(UpdateStats {
        pair_count: kept.len(),
        filtered_pairs: filtered,
        mean_advantage: adv_sum / k,
        alpha_applied,
        max_mahalanobis_sq: max_mah,
    })
}

/// Per-iteration record of the training loop. All fields except the wall
/// times are deterministic functions of (config, seed).
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iteration: usize,
    /// Mean discounted episode cost over the evaluation rollouts.
    pub eval_cost: f64,
    pub value_loss: f64,
    pub value_iterations: usize,
    pub alpha_applied: f64,
    pub mean_advantage: f64,
    pub max_mahalanobis_sq: f64,
    pub filtered_pairs: usize,
    pub diverged_trajectories: usize,
    pub mean_step_cost: f64,
    pub rollout_seconds: f64,
    pub value_seconds: f64,
    pub policy_seconds: f64,
}

/// Split-mix style derivation of phase seeds from the run seed, so resumed
/// runs reproduce the same randomness per iteration.
pub fn phase_seed(seed: u64, phase: u64, iteration: u64) -> u64 {
    let mut z = seed
        .wrapping_add(phase.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(iteration.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Freshly initialized policy and value networks for a run configuration,
/// derived deterministically from the run seed.
pub fn init_networks(cfg: &RunConfig) -> Result<(Mlp, Mlp)> {
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(cfg.seed, 2, 0));
    let mut policy = Mlp::init(&[env::OBS_DIM, 64, 64, env::ACTION_DIM], &mut rng)?;
    if cfg.policy.init_scale > 0.0 {
        policy.randomize_output(cfg.policy.init_scale, &mut rng);
    }
    let value = Mlp::init(&[env::OBS_DIM, 64, 64, 1], &mut rng)?;
    Ok((policy, value))
}

/// Mean discounted episode cost of the policy over fresh rollouts from the
/// training initial-state distribution.
pub fn evaluate_policy(
    policy: &Mlp,
    cfg: &RunConfig,
    rollouts: usize,
    seed: u64,
) -> Result<f64> {
    if rollouts == 0 {
        return Ok(0.0);
    }
    let returns: Vec<f64> = (0..rollouts)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let start = env::sample_initial(&cfg.task.init, &mut rng);
            let traj = rollout::run_episode(
                Some(policy),
                start,
                cfg.train.eval_steps,
                &cfg.quad,
                &cfg.pd,
                &cfg.task,
            )?;
            Ok(rollout::discounted_return(&traj, cfg.task.cost.gamma))
        })
        .collect::<Result<_>>()?;
    Ok(returns.iter().sum::<f64>() / rollouts as f64)
}

/// Full training loop: explore, fit the value network, update the policy,
/// evaluate. `on_iter` fires after each record (including the iteration-0
/// baseline evaluation) so callers can stream logs to disk.
pub fn train(
    cfg: &RunConfig,
    policy: &mut Mlp,
    value: &mut Mlp,
    start_iteration: usize,
    mut on_iter: impl FnMut(&IterRecord) -> Result<()>,
) -> Result<Vec<IterRecord>> {
    let gamma = cfg.task.cost.gamma;
    let mut records = Vec::new();
    if start_iteration == 0 {
        let baseline = IterRecord {
            iteration: 0,
            eval_cost: evaluate_policy(
                policy,
                cfg,
                cfg.train.eval_rollouts,
                phase_seed(cfg.seed, 3, 0),
            )?,
            value_loss: 0.0,
            value_iterations: 0,
            alpha_applied: 0.0,
            mean_advantage: 0.0,
            max_mahalanobis_sq: 0.0,
            filtered_pairs: 0,
            diverged_trajectories: 0,
            mean_step_cost: 0.0,
            rollout_seconds: 0.0,
            value_seconds: 0.0,
            policy_seconds: 0.0,
        };
        on_iter(&baseline)?;
        records.push(baseline);
    }

    for iteration in (start_iteration.max(1))..=cfg.train.iterations {
        let it64 = iteration as u64;
        let t0 = Instant::now();
        let samples = rollout::run_iteration(
            policy,
            value,
            &cfg.quad,
            &cfg.pd,
            &cfg.task,
            &cfg.rollout,
            phase_seed(cfg.seed, 0, it64),
        )?;
        let rollout_seconds = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let fit = value::fit_value(
            value,
            &samples.value_samples,
            &cfg.value,
            phase_seed(cfg.seed, 1, it64),
        )?;
        let value_seconds = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let stats = update_policy(
            policy,
            &samples.pairs,
            &cfg.policy,
            cfg.rollout.noise.sigma,
            gamma,
        )?;
        let policy_seconds = t2.elapsed().as_secs_f64();

        // Evaluate on the same start states every iteration (common random
        // numbers), so curve differences reflect the policy alone.
        let eval_cost = evaluate_policy(
            policy,
            cfg,
            cfg.train.eval_rollouts,
            phase_seed(cfg.seed, 3, 0),
        )?;
        let record = IterRecord {
            iteration,
            eval_cost,
            value_loss: fit.final_loss,
            value_iterations: fit.iterations,
            alpha_applied: stats.alpha_applied,
            mean_advantage: stats.mean_advantage,
            max_mahalanobis_sq: stats.max_mahalanobis_sq,
            filtered_pairs: stats.filtered_pairs,
            diverged_trajectories: samples.stats.diverged,
            mean_step_cost: samples.stats.mean_cost,
            rollout_seconds,
            value_seconds,
            policy_seconds,
        };
        on_iter(&record)?;
        records.push(record);

        if cfg.train.plateau_window > 0 && records.len() > cfg.train.plateau_window {
            let prev = records[records.len() - 1 - cfg.train.plateau_window].eval_cost;
            let now = records.last().unwrap().eval_cost;
            if prev > 0.0 && (prev - now) / prev < cfg.train.plateau_tolerance {
                break;
            }
        }
    }
    Ok(records)
}
