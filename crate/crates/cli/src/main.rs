use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prune_core::admittance::write_controller_trace;
use prune_core::camera::{export_ppm, frame_path, render_segmented};
use prune_core::env::{PolicyAction, Terminal};
use prune_core::harness::{
    evaluate_policy, run_single, run_trials, train_policy, trial_rows, write_outputs, HarnessConfig,
};
use prune_core::policy::train::write_curve_csv;
use prune_core::policy::{load_checkpoint, mean_action, save_checkpoint, EvalPolicy, PolicyNet};
use prune_core::seed::derive;
use prune_core::supervisor::{write_step_trace, ControllerId};

/// Hybrid vision/interaction pruning simulator.
#[derive(Parser, Debug)]
#[command(name = "prune", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file, or `default` for the built-in configuration.
    #[arg(long, global = true, default_value = "default")]
    config: String,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the vision policy and save a checkpoint.
    Train {
        /// Environment steps (overrides train.total_steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Success rate of a policy over held-out episodes.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Baseline::Net)]
        policy: Baseline,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Full controller comparison: trials.csv and summary.md.
    Trial {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dump full-resolution segmented frames of approach episodes as PPM.
    Render {
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Drive the tool with this policy instead of straight-ahead motion.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Step and admittance-controller traces of one trial episode.
    Trace {
        #[arg(long, value_enum, default_value_t = TraceController::Hybrid)]
        controller: TraceController,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the invariant suites.
    Selftest {
        /// Smaller sample counts for the randomised suites.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Baseline {
    Net,
    Random,
    Zero,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TraceController {
    Hybrid,
    ClosedLoop,
    OpenLoop,
    OpenLoopMiscal,
}

impl From<TraceController> for ControllerId {
    fn from(c: TraceController) -> Self {
        match c {
            TraceController::Hybrid => ControllerId::Hybrid,
            TraceController::ClosedLoop => ControllerId::ClosedLoop,
            TraceController::OpenLoop => ControllerId::OpenLoop,
            TraceController::OpenLoopMiscal => ControllerId::OpenLoopMiscalibrated,
        }
    }
}

fn load_config(common: &Common) -> Result<HarnessConfig> {
    let mut cfg = if common.config == "default" {
        HarnessConfig::default()
    } else {
        HarnessConfig::load(Path::new(&common.config))?
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn policy_from(cfg: &HarnessConfig, flag: &Option<PathBuf>) -> Result<Option<PolicyNet<f32>>> {
    match flag.as_ref().or(cfg.checkpoint.as_ref()) {
        Some(path) => Ok(Some(load_checkpoint(path)?)),
        None => Ok(None),
    }
}

fn require_policy(cfg: &HarnessConfig, flag: &Option<PathBuf>) -> Result<PolicyNet<f32>> {
    policy_from(cfg, flag)?.ok_or_else(|| {
        prune_core::Error::Config("a policy checkpoint is required (--checkpoint or `checkpoint` in the config)".into())
            .into()
    })
}

fn create_out(cfg: &HarnessConfig) -> Result<&Path> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn train(cfg: &mut HarnessConfig, steps: Option<usize>) -> Result<()> {
    if let Some(s) = steps {
        cfg.train.total_steps = s;
    }
    let out = create_out(cfg)?.to_path_buf();
    let t0 = Instant::now();
    let (net, curve) = train_policy(cfg, |p| {
        println!(
            "[{:>6.0}s] update {:>3}  steps {:>7}  reward {:+.3}  success {:.3}",
            t0.elapsed().as_secs_f64(),
            p.update,
            p.env_steps,
            p.mean_episode_reward,
            p.success_rate
        );
    })?;
    let ckpt = out.join("policy.bin");
    save_checkpoint(&net, &ckpt)?;
    write_curve_csv(&out.join("curve.csv"), &curve)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn eval(cfg: &mut HarnessConfig, checkpoint: &Option<PathBuf>, policy: Baseline, episodes: Option<usize>) -> Result<()> {
    if let Some(n) = episodes {
        cfg.eval_episodes = n;
    }
    let net;
    let (name, which) = match policy {
        Baseline::Net => {
            net = require_policy(cfg, checkpoint)?;
            ("net", EvalPolicy::Net(&net))
        }
        Baseline::Random => ("random", EvalPolicy::Random),
        Baseline::Zero => ("zero", EvalPolicy::Zero),
    };
    let stats = evaluate_policy(cfg, which)?;
    println!(
        "{name}: {}/{} successful ({:.1}%), mean reward {:.4}",
        stats.successes,
        stats.episodes,
        stats.success_rate * 100.0,
        stats.mean_reward
    );
    let out = create_out(cfg)?;
    let text = format!(
        "policy,episodes,successes,success_rate,mean_reward\n{name},{},{},{},{}\n",
        stats.episodes, stats.successes, stats.success_rate, stats.mean_reward
    );
    let path = out.join("eval.csv");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn trial(cfg: &HarnessConfig, checkpoint: &Option<PathBuf>) -> Result<()> {
    let net = if cfg.needs_policy() {
        Some(require_policy(cfg, checkpoint)?)
    } else {
        None
    };
    let t0 = Instant::now();
    let records = run_trials(cfg, net.as_ref())?;
    let out = create_out(cfg)?;
    let table = write_outputs(out, &trial_rows(cfg, &records))?;
    print!("{}", table.to_markdown());
    println!(
        "{} episodes in {:.1}s; results in {}",
        records.len(),
        t0.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn render(cfg: &HarnessConfig, episodes: usize, checkpoint: &Option<PathBuf>) -> Result<()> {
    let net = policy_from(cfg, checkpoint)?;
    let setup = cfg.episode_setup();
    let root = create_out(cfg)?;
    let mut frames = 0;
    for ep in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[6, ep as u64]));
        let mut env = setup.sample_env(&mut rng)?;
        env.reset(rng.next_u64())?;
        let mut step = 0;
        loop {
            let img = render_segmented(env.scene(), env.pose(), &setup.env.camera);
            export_ppm(&img, &frame_path(&root, ep, step))?;
            frames += 1;
            if env.terminal() != Terminal::Running {
                break;
            }
            let action = match &net {
                Some(net) => {
                    let (m, _) = net.forward(&env.observe()?.to_normalized::<f32>())?;
                    mean_action(&[m[0] as f64, m[1] as f64])
                }
                None => PolicyAction::default(),
            };
            env.step_state(action)?;
            step += 1;
        }
        println!("episode {ep}: {} steps, {}", step, env.terminal().as_str());
    }
    println!("{frames} frames written under {}", root.join("frames").display());
    Ok(())
}

fn trace(cfg: &HarnessConfig, controller: TraceController, trial: usize, checkpoint: &Option<PathBuf>) -> Result<()> {
    let controller = ControllerId::from(controller);
    let net = match controller {
        ControllerId::Hybrid => Some(require_policy(cfg, checkpoint)?),
        _ => None,
    };
    let rec = run_single(cfg, net.as_ref(), trial, controller)?;
    let out = create_out(cfg)?;
    write_step_trace(&out.join("step_trace.csv"), &rec.trace)?;
    write_controller_trace(&out.join("controller_trace.csv"), &rec.controller_trace)?;
    println!(
        "{} trial {trial}: {} after {} ticks, success {}, max force {:.2} N ({} controller rows)",
        controller.as_str(),
        rec.terminal.as_str(),
        rec.steps,
        rec.success,
        rec.max_force,
        rec.controller_trace.len()
    );
    Ok(())
}

fn selftest(cfg: &HarnessConfig, quick: bool) -> Result<bool> {
    let checks = prune_core::selftest::run_all(cfg.seed, quick)?;
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.pass))
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Train { steps } => train(&mut cfg, steps)?,
        Command::Eval {
            checkpoint,
            policy,
            episodes,
        } => eval(&mut cfg, &checkpoint, policy, episodes)?,
        Command::Trial { checkpoint } => trial(&cfg, &checkpoint)?,
        Command::Render { episodes, checkpoint } => render(&cfg, episodes, &checkpoint)?,
        Command::Trace {
            controller,
            trial: k,
            checkpoint,
        } => trace(&cfg, controller, k, &checkpoint)?,
        Command::Selftest { quick } => return selftest(&cfg, quick),
    }
    Ok(true)
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| c.downcast_ref::<prune_core::Error>().is_some_and(prune_core::Error::is_config))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}
