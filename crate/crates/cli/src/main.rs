mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use shepherd_core::env::EpisodeConfig;
use shepherd_core::harness::{self, ExperimentConfig, HarnessError, Policies};
use shepherd_core::nn::{self, MlpParams};
use shepherd_core::rl::{self, PpoHyper, TrainOutput, UpdateStats};
use toml::Value;

use config::{Layers, Resolved};

/// Herding simulation, training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "shepherd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the single-herder driving policy with PPO.
    TrainDriving(RunArgs),
    /// Train the shared target-selection policy with MAPPO on top of a frozen driver.
    TrainSelection {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
    /// Compare controllers on nominal parameters.
    Validate(EvalArgs),
    /// Compare controllers with randomly perturbed target dynamics.
    Robustness(EvalArgs),
    /// Run the learned hierarchy on a large team with local sensing.
    Scale {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
    /// Render SVG figures from the CSV outputs of other subcommands.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML file merged over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Base seed; sets `base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted override such as `sim.D=0`; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Evaluation episodes, or training episodes for the train subcommands.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Debug, Args)]
struct CheckpointArg {
    /// Checkpoint directory from a training run (or a driving checkpoint file).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scenario {
    /// One herder, one target.
    #[value(name = "drive-1v1")]
    Drive1v1,
    /// Two herders, five targets.
    #[value(name = "select-2v5")]
    Select2v5,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    /// Default scenario the config is layered over.
    #[arg(long, value_enum, default_value = "select-2v5")]
    scenario: Scenario,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Directory holding CSV outputs.
    #[arg(long)]
    input: PathBuf,
    /// Directory for the SVG files.
    #[arg(long)]
    out: PathBuf,
    /// Config used for the goal geometry; defaults to the echoed config in the input directory.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.into()),
        }
    }
}

pub const DRIVING_CHECKPOINT: &str = "driving.ckpt";
pub const SELECTION_CHECKPOINT: &str = "selection.ckpt";

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn resolve(
    run: &RunArgs,
    experiment: ExperimentConfig,
    ppo: PpoHyper,
    training: bool,
    mut extra: Vec<(String, Value)>,
) -> Result<Resolved, CliError> {
    let mut flags = Vec::new();
    if let Some(seed) = run.seed {
        let seed = i64::try_from(seed)
            .map_err(|_| CliError::Config(format!("seed {seed} is too large")))?;
        flags.push(("base_seed".to_string(), Value::Integer(seed)));
    }
    if let Some(n) = run.episodes {
        let key = if training {
            "ppo.total_episodes"
        } else {
            "episodes"
        };
        flags.push((key.to_string(), Value::Integer(n as i64)));
    }
    flags.append(&mut extra);
    config::resolve(
        experiment,
        ppo,
        Layers {
            file: run.config.as_deref(),
            overrides: &run.set,
            flags,
        },
    )
}

fn prepare_out(dir: &Path, resolved: &Resolved) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    resolved
        .echo(dir)
        .with_context(|| format!("writing {}", dir.join(config::ECHO_FILE).display()))?;
    Ok(())
}

/// Checkpoint flags: a directory contributes both networks, a file only the driver.
fn checkpoint_flags(arg: &CheckpointArg, selection: bool) -> Vec<(String, Value)> {
    let Some(path) = &arg.checkpoint else {
        return Vec::new();
    };
    if path.is_dir() {
        let mut flags = vec![(
            "checkpoints.driving".to_string(),
            path_value(&path.join(DRIVING_CHECKPOINT)),
        )];
        if selection {
            flags.push((
                "checkpoints.selection".to_string(),
                path_value(&path.join(SELECTION_CHECKPOINT)),
            ));
        }
        flags
    } else {
        vec![("checkpoints.driving".to_string(), path_value(path))]
    }
}

fn load_checkpoint(path: &Option<PathBuf>, key: &str) -> Result<MlpParams, CliError> {
    let path = path.as_ref().ok_or_else(|| {
        CliError::Config(format!(
            "`checkpoints.{key}` is required (or pass --checkpoint)"
        ))
    })?;
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    nn::load_checkpoint(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(CliError::Runtime)
}

fn write_training(
    out: &Path,
    prefix: &str,
    result: &TrainOutput,
    window: usize,
) -> anyhow::Result<()> {
    nn::save_checkpoint(&result.actor, &out.join(format!("{prefix}.ckpt")))?;
    nn::save_checkpoint(&result.critic, &out.join(format!("{prefix}_critic.ckpt")))?;
    rl::write_learning_curve(
        &out.join(format!("{prefix}_curve.csv")),
        &result.episode_rewards,
        window,
    )?;
    let mut w = csv::Writer::from_path(out.join(format!("{prefix}_updates.csv")))?;
    for u in &result.updates {
        w.serialize(u)?;
    }
    w.flush()?;
    let tail = result.episode_rewards.len().min(window).max(1);
    let recent = &result.episode_rewards[result.episode_rewards.len().saturating_sub(tail)..];
    let mean = recent.iter().sum::<f64>() / recent.len().max(1) as f64;
    let last: Option<&UpdateStats> = result.updates.last();
    println!(
        "{prefix}: {} episodes, {} updates, mean reward of last {} episodes {:.2}{}",
        result.episode_rewards.len(),
        result.updates.len(),
        recent.len(),
        mean,
        last.map(|u| format!(", final clip fraction {:.3}", u.clip_fraction))
            .unwrap_or_default()
    );
    Ok(())
}

fn train_driving(run: &RunArgs) -> Result<(), CliError> {
    let r = resolve(
        run,
        ExperimentConfig::drive_1v1(),
        PpoHyper::driving(),
        true,
        Vec::new(),
    )?;
    let e = &r.experiment;
    if e.sim.num_herders != 1 || e.sim.num_targets != 1 {
        return Err(CliError::Config(
            "driving is trained with sim.num_herders = sim.num_targets = 1".into(),
        ));
    }
    prepare_out(&run.out, &r)?;
    log::info!(
        "training driving policy for {} episodes",
        r.ppo.total_episodes
    );
    let result = rl::train_driving(&r.ppo, &e.sim, &e.episode, &e.gains, e.base_seed)
        .context("driving training")?;
    write_training(&run.out, "driving", &result, rl::DRIVING_WINDOW)?;
    Ok(())
}

fn train_selection(run: &RunArgs, ckpt: &CheckpointArg) -> Result<(), CliError> {
    let defaults = ExperimentConfig {
        episode: EpisodeConfig::selection(),
        ..ExperimentConfig::select_2v5()
    };
    let r = resolve(
        run,
        defaults,
        PpoHyper::selection(),
        true,
        checkpoint_flags(ckpt, false),
    )?;
    let e = &r.experiment;
    let driver = load_checkpoint(&e.checkpoints.driving, "driving")?;
    prepare_out(&run.out, &r)?;
    log::info!(
        "training selection policy for {} episodes",
        r.ppo.total_episodes
    );
    let result = rl::train_selection(&r.ppo, &e.sim, &e.episode, &e.gains, &driver, e.base_seed)
        .context("selection training")?;
    // Keep the frozen driver next to the selector so the directory is a complete checkpoint.
    nn::save_checkpoint(&driver, &run.out.join(DRIVING_CHECKPOINT))
        .context("saving driver copy")?;
    write_training(&run.out, "selection", &result, rl::SELECTION_WINDOW)?;
    Ok(())
}

fn evaluate(args: &EvalArgs, perturbed: bool) -> Result<(), CliError> {
    let defaults = match args.scenario {
        Scenario::Drive1v1 => ExperimentConfig::drive_1v1(),
        Scenario::Select2v5 => ExperimentConfig::select_2v5(),
    };
    let multi = matches!(args.scenario, Scenario::Select2v5);
    let mut flags = checkpoint_flags(&args.checkpoint, multi);
    if !flags.is_empty() {
        let both = Value::Array(vec![
            Value::String("heuristic".into()),
            Value::String("learned".into()),
        ]);
        flags.push(("controllers".into(), both));
    }
    if perturbed {
        flags.push(("perturbation.enabled".into(), Value::Boolean(true)));
    }
    let r = resolve(&args.run, defaults, PpoHyper::driving(), false, flags)?;
    let e = &r.experiment;
    let multi = e.sim.num_herders > 1 || e.sim.num_targets > 1;
    let policies = Policies::load(e, multi)?;
    let out = &args.run.out;
    prepare_out(out, &r)?;
    log::info!("running {} episodes per controller", e.episodes);
    let v = harness::run_validation_with(e, &policies)?;
    harness::write_episode_rows(&out.join("episodes.csv"), &v.rows())?;
    harness::write_report(out, &v.report)?;
    for (kind, snapshots) in &v.trajectories {
        harness::write_trajectory(
            &out.join(format!("trajectory_{}.csv", kind.name())),
            snapshots,
        )?;
    }
    for (kind, trace) in &v.traces {
        harness::write_trace(&out.join(format!("trace_{}.csv", kind.name())), trace)?;
    }
    print!("{}", v.report.to_text());
    Ok(())
}

fn scale(run: &RunArgs, ckpt: &CheckpointArg) -> Result<(), CliError> {
    let r = resolve(
        run,
        ExperimentConfig::select_2v5(),
        PpoHyper::selection(),
        false,
        checkpoint_flags(ckpt, true),
    )?;
    let e = &r.experiment;
    let policies = Policies {
        driver: Some(load_checkpoint(&e.checkpoints.driving, "driving")?),
        selector: Some(load_checkpoint(&e.checkpoints.selection, "selection")?),
    };
    prepare_out(&run.out, &r)?;
    let s = harness::run_scale_demo_with(e, &policies)?;
    harness::write_trace(&run.out.join("scale_trace.csv"), &s.trace)?;
    harness::write_trajectory(&run.out.join("scale_trajectory.csv"), &s.snapshots)?;
    let last = s.trace.last().expect("trace holds the initial state");
    println!(
        "{} herders, {} targets: {} steps, success {}, final chi {:.3}, final mean radius {:.2}",
        s.params.num_herders,
        s.params.num_targets,
        s.record.steps,
        s.record.success,
        last.chi,
        last.mean_radius
    );
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<(), CliError> {
    let echoed = args.input.join(config::ECHO_FILE);
    let file = args
        .config
        .clone()
        .or_else(|| echoed.is_file().then_some(echoed));
    let r = config::resolve(
        ExperimentConfig::default(),
        PpoHyper::driving(),
        Layers {
            file: file.as_deref(),
            overrides: &[],
            flags: Vec::new(),
        },
    )?;
    let written = plot::emit_plots(&args.input, &args.out, &r.experiment.sim)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::TrainDriving(run) => train_driving(run),
        Command::TrainSelection { run, checkpoint } => train_selection(run, checkpoint),
        Command::Validate(args) => evaluate(args, false),
        Command::Robustness(args) => evaluate(args, true),
        Command::Scale { run, checkpoint } => scale(run, checkpoint),
        Command::Plot(args) => plot(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
