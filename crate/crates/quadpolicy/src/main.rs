use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use quadpolicy::config::RunConfig;
use quadpolicy::mlp::Mlp;
use quadpolicy::optim::{self, IterRecord};
use quadpolicy::{env, eval, rollout, Error, Result};

#[derive(Parser)]
#[command(name = "quadpolicy", about = "Quadrotor controller training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train policy and value networks, writing all artifacts to a run
    /// directory. Resumes from checkpoints already present there.
    Train(TrainArgs),
    /// Evaluate a saved policy on the recovery or waypoint suite.
    Evaluate(EvalArgs),
    /// Microbenchmarks: policy inference latency or the natural-gradient
    /// solver comparison.
    Bench(BenchArgs),
    /// Fly one episode and export the trajectory as CSV.
    ExportTraj(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for networks, CSV logs and the resolved config.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of training iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Start from the built-in desk-scale smoke configuration.
    #[arg(long)]
    smoke: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Recovery,
    Waypoint,
}

#[derive(Args)]
struct EvalArgs {
    /// Saved policy network. Omit (with --pd-only) to evaluate the hover
    /// bias + PD stub alone.
    #[arg(long, required_unless_present = "pd_only")]
    policy: Option<PathBuf>,
    #[arg(long)]
    pd_only: bool,
    #[arg(long, value_enum, default_value_t = EvalMode::Recovery)]
    mode: EvalMode,
    /// Recovery rollout count.
    #[arg(long, default_value_t = 100)]
    rollouts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for trajectory CSV dumps (skipped when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BenchMode {
    Inference,
    Solver,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchMode::Inference)]
    mode: BenchMode,
    /// Policy to time; a randomly initialized 18-64-64-4 network is used
    /// when omitted.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Inference repetitions.
    #[arg(long, default_value_t = 100_000)]
    repetitions: usize,
    /// Solver problem instances.
    #[arg(long, default_value_t = 5)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, required_unless_present = "pd_only")]
    policy: Option<PathBuf>,
    #[arg(long)]
    pd_only: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start altitude above the evaluation ground plane.
    #[arg(long, default_value_t = 2.0)]
    altitude: f64,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    // Map clap's usage errors onto exit code 1; code 2 is reserved for
    // numerical divergence.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Bench(args) => cmd_bench(args),
        Command::ExportTraj(args) => cmd_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Divergence(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_policy(path: &Path) -> Result<Mlp> {
    let net = Mlp::load(path)?;
    if net.input_dim() != env::OBS_DIM || net.output_dim() != env::ACTION_DIM {
        return Err(Error::DimensionMismatch(format!(
            "{}: policy must map {} -> {}, file has {} -> {}",
            path.display(),
            env::OBS_DIM,
            env::ACTION_DIM,
            net.input_dim(),
            net.output_dim()
        )));
    }
    Ok(net)
}

const CURVE_HEADER: &str = "iteration,eval_cost,value_loss,value_iterations,alpha_applied,\
mean_advantage,max_mahalanobis_sq,filtered_pairs,diverged_trajectories,mean_step_cost";
const TIMINGS_HEADER: &str = "iteration,rollout_seconds,value_seconds,policy_seconds";

fn curve_line(r: &IterRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.iteration,
        r.eval_cost,
        r.value_loss,
        r.value_iterations,
        r.alpha_applied,
        r.mean_advantage,
        r.max_mahalanobis_sq,
        r.filtered_pairs,
        r.diverged_trajectories,
        r.mean_step_cost
    )
}

/// Number of completed iterations recorded in a learning-curve CSV, i.e.
/// the largest iteration column value.
fn completed_iterations(path: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(path)?;
    let mut last = None;
    for line in text.lines().skip(1) {
        let it: usize = line
            .split(',')
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad learning-curve line {line:?}")))?;
        last = Some(it);
    }
    last.ok_or_else(|| Error::Parse("learning-curve CSV has no data rows".into()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = if args.smoke {
        if args.config.is_some() {
            return Err(Error::Config("--smoke and --config are exclusive".into()));
        }
        RunConfig::smoke(0)
    } else {
        load_config(&args.config)?
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        cfg.train.iterations = iterations;
    }
    cfg.validate()?;

    std::fs::create_dir_all(&args.out)?;
    let policy_path = args.out.join("policy.net");
    let value_path = args.out.join("value.net");
    let curve_path = args.out.join("learning_curve.csv");
    let timings_path = args.out.join("timings.csv");
    cfg.save(&args.out.join("config.toml"))?;

    let resuming = policy_path.exists() && value_path.exists() && curve_path.exists();
    let (mut policy, mut value, start_iteration) = if resuming {
        let done = completed_iterations(&curve_path)?;
        eprintln!("resuming after iteration {done}");
        (load_policy(&policy_path)?, Mlp::load(&value_path)?, done + 1)
    } else {
        let (policy, value) = optim::init_networks(&cfg)?;
        std::fs::write(&curve_path, format!("{CURVE_HEADER}\n"))?;
        std::fs::write(&timings_path, format!("{TIMINGS_HEADER}\n"))?;
        (policy, value, 0)
    };

    let mut curve = std::fs::OpenOptions::new().append(true).open(&curve_path)?;
    let mut timings = std::fs::OpenOptions::new()
        .append(true)
        .open(&timings_path)?;

    let on_iter = |r: &IterRecord| -> Result<()> {
        writeln!(curve, "{}", curve_line(r))?;
        writeln!(
            timings,
            "{},{},{},{}",
            r.iteration, r.rollout_seconds, r.value_seconds, r.policy_seconds
        )?;
        println!(
            "iter {:4}  eval_cost {:.6}  value_loss {:.6}  alpha {:.3e}",
            r.iteration, r.eval_cost, r.value_loss, r.alpha_applied
        );
        Ok(())
    };
    let records = optim::train(&cfg, &mut policy, &mut value, start_iteration, on_iter)?;
    policy.save(&policy_path)?;
    value.save(&value_path)?;
    if let Some(last) = records.last() {
        println!("final eval cost {:.6}", last.eval_cost);
    }
    Ok(())
}

fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let policy = match (&args.policy, args.pd_only) {
        (Some(path), false) => Some(load_policy(path)?),
        (None, true) => None,
        _ => {
            return Err(Error::Config(
                "pass exactly one of --policy or --pd-only".into(),
            ))
        }
    };
    match args.mode {
        EvalMode::Recovery => {
            let report =
                eval::evaluate_recovery(policy.as_ref(), &cfg, args.rollouts, args.seed)?;
            println!(
                "recovery: {} rollouts, {} failures ({} diverged), failure rate {:.3}",
                report.rollouts,
                report.failures,
                report.diverged,
                report.failure_rate()
            );
            if let Some(out) = &args.out {
                std::fs::create_dir_all(out)?;
                let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                let start = eval::recovery_start(cfg.eval.start_altitude, &mut rng);
                let traj = rollout::run_episode_to(
                    policy.as_ref(),
                    start,
                    &nalgebra::Vector3::new(0.0, 0.0, cfg.eval.start_altitude),
                    cfg.eval.episode_steps,
                    &cfg.quad,
                    &cfg.pd,
                    &cfg.task,
                )?;
                let path = out.join("recovery_rollout0.csv");
                eval::write_trajectory_csv(&path, &traj, &cfg)?;
                println!("wrote {}", path.display());
            }
        }
        EvalMode::Waypoint => {
            let policy = policy.ok_or_else(|| {
                Error::Config("waypoint mode needs a trained policy (--policy)".into())
            })?;
            let (report, traj) = eval::evaluate_waypoints(&policy, &cfg)?;
            println!(
                "waypoint: mean error {:.4} m, max {:.4} m, steady-state {:.4} m over {} steps",
                report.mean_tracking_error,
                report.max_tracking_error,
                report.steady_state_error,
                report.steps
            );
            if let Some(out) = &args.out {
                std::fs::create_dir_all(out)?;
                let path = out.join("waypoint_trajectory.csv");
                eval::write_trajectory_csv(&path, &traj, &cfg)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    if cfg!(debug_assertions) {
        eprintln!("warning: unoptimized build; timings are not representative");
    }
    match args.mode {
        BenchMode::Inference => {
            let policy = match &args.policy {
                Some(path) => load_policy(path)?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                    Mlp::init(&[env::OBS_DIM, 64, 64, env::ACTION_DIM], &mut rng)?
                }
            };
            let report = eval::bench_inference(&policy, args.repetitions.max(1))?;
            println!(
                "inference: {} repetitions, median {:.3} us, p99 {:.3} us",
                report.repetitions, report.median_us, report.p99_us
            );
        }
        BenchMode::Solver => {
            let report = eval::bench_solver(args.samples.max(1), 0.33, args.seed)?;
            println!(
                "solver: svd {:.3} ms/sample (residual {:.3e}), cg {:.3} ms/sample (residual {:.3e}), ratio {:.2}, max solution diff {:.3e}",
                report.svd_ms_per_sample,
                report.svd_residual,
                report.cg_ms_per_sample,
                report.cg_residual,
                report.cg_ms_per_sample / report.svd_ms_per_sample,
                report.solution_difference
            );
        }
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let policy = match (&args.policy, args.pd_only) {
        (Some(path), false) => Some(load_policy(path)?),
        (None, true) => None,
        _ => {
            return Err(Error::Config(
                "pass exactly one of --policy or --pd-only".into(),
            ))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let start = eval::recovery_start(args.altitude, &mut rng);
    let traj = rollout::run_episode_to(
        policy.as_ref(),
        start,
        &nalgebra::Vector3::new(0.0, 0.0, args.altitude),
        args.steps,
        &cfg.quad,
        &cfg.pd,
        &cfg.task,
    )?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    eval::write_trajectory_csv(&args.out, &traj, &cfg)?;
    println!(
        "wrote {} ({} steps{})",
        args.out.display(),
        traj.len(),
        if traj.diverged { ", diverged" } else { "" }
    );
    Ok(())
}
