use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kmfc_core::bench::run_bench;
use kmfc_core::checks::kernel_check;
use kmfc_core::config::{ExperimentConfig, Manifest, PRESETS};
use kmfc_core::diffnet::{Checkpoint, PolicyNetwork};
use kmfc_core::ensemble::{sample_noise, RngStream};
use kmfc_core::models::{Backend, ModelSpec};
use kmfc_core::trainer::{evaluate, rollout, snapshot_csv, train, EVAL_STREAM};

#[derive(Parser)]
#[command(name = "kmfc", version, about = "Mean field control with kernel interactions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a feedback policy and write the report, checkpoint and snapshots.
    Train(RunArgs),
    /// Evaluate a checkpoint with the exact kernel.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time full rollouts under both interaction backends.
    Bench(RunArgs),
    /// Check the configured kernel's feature sampler.
    KernelCheck(RunArgs),
    /// Write a ready-made config.
    EmitDemoConfig {
        /// One of crowd-gaussian, crowd-matern, flock-cauchy, flock-cauchy-beta1.
        name: String,
        /// Destination file; prints to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Particle count: training population, evaluation population, or the single bench size.
    #[arg(long = "N")]
    particles: Option<usize>,
    /// Number of frequency samples.
    #[arg(long = "M")]
    features: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Naive,
    Rff,
}

enum Failure {
    /// Bad invocation or config: exit 2.
    Usage(String),
    /// The command ran and failed: exit 1.
    Run(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nrun `kmfc --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval { run, checkpoint } => cmd_eval(&run, &checkpoint),
        Command::Bench(args) => cmd_bench(&args),
        Command::KernelCheck(args) => cmd_kernel_check(&args),
        Command::EmitDemoConfig { name, out } => cmd_emit(&name, out.as_deref()),
    }
}

/// Loads the config, applies flag overrides and prepares the output directory.
fn load(args: &RunArgs, apply_n: impl FnOnce(&mut ExperimentConfig, usize)) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if let Some(b) = args.backend {
        cfg.interaction.backend = match b {
            BackendArg::Naive => Backend::Naive,
            BackendArg::Rff => Backend::Rff,
        };
    }
    if let Some(n) = args.particles {
        apply_n(&mut cfg, n);
    }
    if let Some(m) = args.features {
        cfg.interaction.features = m;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir)?;
    cfg.save(&dir.join("config.toml"))?;
    Ok((cfg, dir))
}

fn finish(command: &str, cfg: &ExperimentConfig, dir: &Path, mut outputs: Vec<String>) -> CliResult {
    outputs.insert(0, "config.toml".into());
    Manifest::new(command, cfg, outputs).save(&dir.join("manifest.json"))?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

/// Exact-backend rollout of `net` on evaluation noise 0, written at the configured steps.
fn write_snapshots(cfg: &ExperimentConfig, net: &PolicyNetwork, dir: &Path) -> CliResult<Vec<String>> {
    if cfg.output.snapshot_steps.is_empty() {
        return Ok(Vec::new());
    }
    let model = ModelSpec { backend: Backend::Naive, ..cfg.model_spec() };
    let grid = cfg.time_grid()?;
    let noise = sample_noise(&grid, cfg.train.eval_particles, model.noise_dim(), &cfg.initial, RngStream::new(cfg.seed, EVAL_STREAM))?;
    let rec = rollout(&model, net, &grid, &noise, None)?;
    fs::create_dir_all(dir.join("snapshots"))?;
    let mut names = Vec::new();
    for &step in &cfg.output.snapshot_steps {
        let name = format!("snapshots/step_{step}.csv");
        fs::write(dir.join(&name), snapshot_csv(&rec, step)?)?;
        names.push(name);
    }
    Ok(names)
}

fn cmd_train(args: &RunArgs) -> CliResult {
    let (cfg, dir) = load(args, |c, n| c.train.particles = n)?;
    let run = train(&cfg, |row| {
        if let Some(e) = row.eval_cost {
            eprintln!("iteration {:>5}  eval cost {e:.6}", row.iteration);
        }
    })?;
    fs::write(dir.join("train_report.csv"), run.report.to_csv())?;
    run.trainer.checkpoint().save(&dir.join("checkpoint.json"))?;
    let mut outputs = vec!["train_report.csv".to_string(), "checkpoint.json".to_string()];
    outputs.extend(write_snapshots(&cfg, run.trainer.network(), &dir)?);
    finish("train", &cfg, &dir, outputs)?;
    if let (Some(first), Some(last)) = (run.report.initial_evaluation(), run.report.final_evaluation()) {
        eprintln!("eval cost {:.6} -> {:.6} (ratio {:.4})", first.mean, last.mean, last.mean / first.mean);
    }
    match run.failure {
        Some(e) => Err(Failure::Run(format!("{e}; report written up to the failure"))),
        None => Ok(()),
    }
}

fn cmd_eval(args: &RunArgs, checkpoint: &Path) -> CliResult {
    let (cfg, dir) = load(args, |c, n| c.train.eval_particles = n)?;
    let net = Checkpoint::load(checkpoint)?.to_network()?;
    let model = cfg.model_spec();
    let grid = cfg.time_grid()?;
    let e = evaluate(&model, &net, &grid, &cfg.initial, cfg.train.eval_particles, cfg.train.eval_rollouts, cfg.seed)?;
    let mut csv = String::from("rollout,total_cost\n");
    for (r, c) in e.costs.iter().enumerate() {
        csv.push_str(&format!("{r},{c}\n"));
    }
    fs::write(dir.join("eval.csv"), csv)?;
    let summary = serde_json::json!({
        "mean": e.mean,
        "stderr": e.stderr,
        "terminal_distance": e.terminal_distance,
        "centroid_distance": e.centroid_distance,
        "particles": cfg.train.eval_particles,
        "rollouts": cfg.train.eval_rollouts,
    });
    fs::write(dir.join("eval_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut outputs = vec!["eval.csv".to_string(), "eval_summary.json".to_string()];
    outputs.extend(write_snapshots(&cfg, &net, &dir)?);
    finish("eval", &cfg, &dir, outputs)?;
    println!("cost {:.6} ± {:.6}", e.mean, e.stderr);
    Ok(())
}

fn cmd_bench(args: &RunArgs) -> CliResult {
    let (cfg, dir) = load(args, |c, n| c.bench.particles = vec![n])?;
    let res = run_bench(&cfg, &cfg.bench.particles, cfg.bench.repeats, cfg.bench.warmup)?;
    fs::write(dir.join("bench.csv"), res.to_csv())?;
    print!("{}", res.to_csv());
    for b in [Backend::Naive, Backend::Rff] {
        if let Some(s) = res.wall_clock_slope(b) {
            println!("{b:?} wall-clock log-log slope {s:.3} (M = {}, lanes = {})", res.features, res.lanes);
        }
    }
    finish("bench", &cfg, &dir, vec!["bench.csv".into()])
}

fn cmd_kernel_check(args: &RunArgs) -> CliResult {
    if args.particles.is_some() || args.features.is_some() || args.backend.is_some() {
        return Err(Failure::Usage("kernel-check takes only --config, --seed and --out".into()));
    }
    let (cfg, dir) = load(args, |_, _| {})?;
    let lines = kernel_check(&cfg.kernel, cfg.model.position_dim, cfg.seed)?;
    let mut csv = String::from("check,passed,detail\n");
    for l in &lines {
        println!("{l}");
        csv.push_str(&format!("{},{},\"{}\"\n", l.name, l.passed, l.detail));
    }
    fs::write(dir.join("kernel_check.csv"), csv)?;
    finish("kernel-check", &cfg, &dir, vec!["kernel_check.csv".into()])?;
    if lines.iter().all(|l| l.passed) {
        Ok(())
    } else {
        Err(Failure::Run("kernel check failed".into()))
    }
}

fn cmd_emit(name: &str, out: Option<&Path>) -> CliResult {
    let cfg = ExperimentConfig::preset(name)
        .map_err(|_| Failure::Usage(format!("unknown preset {name:?}; expected one of {}", PRESETS.join(", "))))?;
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            cfg.save(path)?;
        }
        None => print!("{}", cfg.to_toml()),
    }
    Ok(())
}
