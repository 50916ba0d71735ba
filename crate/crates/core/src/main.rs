use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mpgd::guidance::{Method, OptimizerKind};
use mpgd::harness::{emit_outputs, exit_code, exit_code_for, run_experiment, verify, EmitOptions, ExperimentConfig, Suite};
use mpgd::{Error, Result};

#[derive(Parser)]
#[command(name = "mpgd", version, about = "Guided diffusion samplers on linear-subspace data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    /// Time-travel repeats per step.
    #[arg(long, global = true)]
    travel: Option<usize>,
    /// Inner optimization steps on the clean estimate.
    #[arg(long, global = true)]
    inner: Option<usize>,
    #[arg(long, global = true, value_enum)]
    optimizer: Option<Optimizer>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    no_trajectories: bool,
    /// Worker threads for chains (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optimizer {
    Gd,
    Cg,
}

#[derive(Subcommand)]
enum Command {
    /// Unguided DDIM sampling.
    Sample,
    /// Guided sampling with the configured method.
    Guide,
    /// Built-in self-checks; prints a JSON report.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Guided run with the bound audit on; prints per-step summaries.
    Diagnose,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::linear_inverse(64, 8, Method::MpgdAe, 50, 8),
    };
    if let Some(m) = &cli.method {
        cfg.method = m.parse()?;
    }
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(t) = cli.steps {
        cfg.schedule.steps = t;
    }
    if let Some(e) = cli.eta {
        cfg.schedule.eta = e;
    }
    if let Some(r) = cli.rho {
        cfg.step_size.rho = r;
    }
    if let Some(m) = cli.travel {
        cfg.travel = m;
    }
    if let Some(n) = cli.inner {
        cfg.inner.steps = n;
    }
    if let Some(o) = cli.optimizer {
        cfg.inner.optimizer = match o {
            Optimizer::Gd => OptimizerKind::GradientDescent,
            Optimizer::Cg => OptimizerKind::ConjugateGradient,
        };
    }
    if let Some(dir) = &cli.out {
        cfg.output.dir = dir.clone();
    }
    if cli.no_trajectories {
        cfg.output.trajectories = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: ExperimentConfig) -> Result<i32> {
    let mut out = run_experiment(&cfg, cli.workers)?;
    let options = EmitOptions { trajectories: cfg.output.trajectories, force: cli.force };
    emit_outputs(&mut out, &cfg, &cfg.output.dir, options)?;
    let r = &out.record;
    println!("{} chains, method {}, mean terminal loss {:.6e}, output in {}", r.chains.len(), r.method, r.mean_loss(), cfg.output.dir.display());
    Ok(if r.failed { exit_code::NUMERICAL } else { exit_code::SUCCESS })
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Sample => {
            let mut cfg = load_config(cli)?;
            cfg.method = Method::Ddim;
            run(cli, cfg)
        }
        Command::Guide => {
            let cfg = load_config(cli)?;
            if !cfg.method.is_guided() {
                return Err(Error::config("method", "guide needs a guided method; use `sample` for ddim"));
            }
            run(cli, cfg)
        }
        Command::Verify { suite } => {
            let suite: Suite = suite.parse()?;
            let report = verify(suite, cli.seed.unwrap_or(0))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.passed { exit_code::SUCCESS } else { exit_code::VERIFICATION })
        }
        Command::Diagnose => {
            let mut cfg = load_config(cli)?;
            cfg.audit_bound = true;
            cfg.output.trajectories = false;
            let out = run_experiment(&cfg, cli.workers)?;
            let mut rows = Vec::new();
            let steps = out.curves.first().map_or(0, |c| c.points.len());
            for i in 0..steps {
                let pts: Vec<_> = out.curves.iter().map(|c| c.points[i]).collect();
                let n = pts.len() as f64;
                let cos: Vec<f64> = pts.iter().filter_map(|p| p.cosine.map(f64::abs)).collect();
                let shell: Vec<f64> = pts.iter().filter_map(|p| p.shell_residual).collect();
                let slack = pts.iter().filter_map(|p| p.bound.map(|b| b.rhs - b.lhs)).fold(f64::INFINITY, f64::min);
                rows.push(json!({
                    "t": pts[0].t,
                    "mean_abs_cosine": (!cos.is_empty()).then(|| cos.iter().sum::<f64>() / cos.len() as f64),
                    "mean_shell_residual": (!shell.is_empty()).then(|| shell.iter().sum::<f64>() / shell.len() as f64),
                    "mean_off_manifold_norm": pts.iter().map(|p| p.off_manifold_norm).sum::<f64>() / n,
                    "min_bound_slack": slack.is_finite().then_some(slack),
                }));
            }
            println!("{}", serde_json::to_string_pretty(&json!({ "method": cfg.method.name(), "steps": rows }))?);
            Ok(if out.record.failed { exit_code::NUMERICAL } else { exit_code::SUCCESS })
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let code = match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    };
    ExitCode::from(code as u8)
}
