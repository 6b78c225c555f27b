//! Command-line front end: dataset generation, model training, closed-loop
//! evaluation, the compounding-error study, adaptation (fine-tuning and
//! distillation), timing benchmarks, and score-reference calibration.
//!
//! Every command reads the same `key = value` config format (see
//! `ExperimentConfig`) and honors the global `--seed`, `--out`, and
//! `--preset` overrides. Commands that write CSVs are deterministic for a
//! fixed config and seed.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dmpc::adapt::{collect_play_data, distill, finetune_dynamics, FinetuneConfig};
use dmpc::data::{generate_dataset, load_dataset, save_dataset, Dataset, PolicyKind};
use dmpc::harness::{
    bench_timing, calibrate_refs, rmsd_defaults, rmsd_study, run_experiment, save_refs,
    with_agent, ConfigMap, ExperimentAssets, ExperimentConfig, LinePlot, REF_EPISODES,
};
use dmpc::models::{
    load_dynamics, save_dynamics, save_mbop, save_objective, save_proposal, ActionProposal,
    DynamicsKind, DynamicsModel, MbopComponents, MbopTrainConfig, ObjectiveModel, Preset,
    ProposalKind, TrainConfig,
};
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "dmpc", version, about = "Diffusion-based MPC toolkit")]
struct Cli {
    /// Config file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides `experiment.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Scale preset, desk or paper; overrides `experiment.preset`.
    #[arg(long, global = true)]
    preset: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded offline dataset into the output directory.
    GenData {
        /// Behaviour policy: scripted-expert, scripted-noisy, or
        /// random-mixture.
        #[arg(long)]
        policy: String,
        /// Episodes to roll out.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Train a model on the configured dataset and save it.
    Train {
        /// What to train: proposal, dynamics, objective, or mbop.
        #[arg(long)]
        model: String,
        /// Network kind (proposal: ss-mlp, ss-diff, ms-diff; dynamics adds
        /// art). Ignored for objective and mbop.
        #[arg(long)]
        kind: Option<String>,
        /// Prediction horizon; defaults to `planner.horizon` for multi-step
        /// kinds and 1 for single-step kinds.
        #[arg(long)]
        horizon: Option<usize>,
        /// Optimization steps.
        #[arg(long, default_value_t = 20_000)]
        steps: usize,
        /// Minibatch size.
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Early-termination penalty folded into return targets.
        #[arg(long, default_value_t = 100.0)]
        penalty: f64,
        /// MBOP ensemble size.
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Run the configured closed-loop experiment and write reports.
    Eval,
    /// Compounding-error study of the configured dynamics model.
    RolloutError {
        /// Windows to sample; defaults to the preset's study size.
        #[arg(long)]
        samples: Option<usize>,
        /// Deepest horizon; defaults to the preset's study length.
        #[arg(long)]
        max_horizon: Option<usize>,
    },
    /// Collect play data on the defective env and fine-tune the dynamics.
    Finetune {
        /// Play episodes to collect with the configured planner.
        #[arg(long, default_value_t = 100)]
        play_episodes: usize,
        /// Fine-tuning optimization steps.
        #[arg(long, default_value_t = 20_000)]
        steps: usize,
        /// Minibatch size.
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Distill the configured planner into a reactive policy.
    Distill {
        /// Cap on supervision states drawn from the dataset.
        #[arg(long, default_value_t = 2048)]
        max_states: usize,
        /// Optimization steps.
        #[arg(long, default_value_t = 20_000)]
        steps: usize,
        /// Minibatch size.
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Time the configured planner's per-step planning cost.
    Bench {
        /// Timed steps (after warmup).
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Run the reference policies and cache their mean returns.
    CalibrateRefs {
        /// Episodes per reference policy.
        #[arg(long, default_value_t = REF_EPISODES)]
        episodes: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::from_map(
            &ConfigMap::load(path).context("reading --config")?,
        )?,
        None => ExperimentConfig::from_map(&ConfigMap::parse("", "<empty>")?)?,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    if let Some(name) = &cli.preset {
        config.preset =
            Preset::parse(name).with_context(|| format!("unknown preset {name:?}"))?;
    }

    match cli.command {
        Command::GenData { policy, episodes } => gen_data(&config, &policy, episodes),
        Command::Train { model, kind, horizon, steps, batch, penalty, k } => {
            train(&config, &model, kind.as_deref(), horizon, steps, batch, penalty, k)
        }
        Command::Eval => eval(&config),
        Command::RolloutError { samples, max_horizon } => {
            rollout_error(&config, samples, max_horizon)
        }
        Command::Finetune { play_episodes, steps, batch } => {
            finetune(&config, play_episodes, steps, batch)
        }
        Command::Distill { max_states, steps, batch } => {
            run_distill(&config, max_states, steps, batch)
        }
        Command::Bench { steps } => bench(&config, steps),
        Command::CalibrateRefs { episodes } => calibrate(&config, episodes),
    }
}

fn load_config_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let path = config
        .dataset
        .as_ref()
        .context("this command needs `experiment.dataset` in the config")?;
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn gen_data(config: &ExperimentConfig, policy: &str, episodes: usize) -> Result<()> {
    let kind = PolicyKind::parse(policy)
        .with_context(|| format!("unknown policy {policy:?} (scripted-expert, scripted-noisy, random-mixture)"))?;
    if episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    let dataset = generate_dataset(&config.env, kind, episodes, config.seed);
    save_dataset(&dataset, &config.out_dir)?;
    println!(
        "wrote {} episodes of {} ({}) to {}",
        episodes,
        config.env.name.as_str(),
        kind.as_str(),
        config.out_dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &ExperimentConfig,
    model: &str,
    kind: Option<&str>,
    horizon: Option<usize>,
    steps: usize,
    batch: usize,
    penalty: f64,
    k: usize,
) -> Result<()> {
    let dataset = load_config_dataset(config)?;
    let tc = TrainConfig::standard(steps, batch, config.seed);
    let out = &config.out_dir;
    match model {
        "proposal" => {
            let kind = kind.context("--kind is required for --model proposal")?;
            let kind = ProposalKind::parse(kind)
                .with_context(|| format!("unknown proposal kind {kind:?}"))?;
            let h = horizon.unwrap_or(if kind == ProposalKind::MsDiff {
                config.planner.horizon
            } else {
                1
            });
            let trained = ActionProposal::train(&dataset, kind, config.preset, h, &tc)?;
            save_proposal(&trained, out)?;
            println!("saved {} proposal (horizon {h}) to {}", kind.as_str(), out.display());
        }
        "dynamics" => {
            let kind = kind.context("--kind is required for --model dynamics")?;
            let kind = DynamicsKind::parse(kind)
                .with_context(|| format!("unknown dynamics kind {kind:?}"))?;
            let h = horizon.unwrap_or(match kind {
                DynamicsKind::MsDiff | DynamicsKind::Art => config.planner.horizon,
                DynamicsKind::SsMlp | DynamicsKind::SsDiff => 1,
            });
            let trained = DynamicsModel::train(&dataset, kind, config.preset, h, &tc)?;
            save_dynamics(&trained, out)?;
            println!("saved {} dynamics (horizon {h}) to {}", kind.as_str(), out.display());
        }
        "objective" => {
            let h = horizon.unwrap_or(config.planner.horizon);
            let trained =
                ObjectiveModel::train(&dataset, config.preset, h, config.gamma, penalty, &tc)?;
            save_objective(&trained, out)?;
            println!("saved objective (horizon {h}) to {}", out.display());
        }
        "mbop" => {
            let mc = MbopTrainConfig { k, train: tc, gamma: config.gamma, penalty };
            let trained = MbopComponents::train(&dataset, &mc)?;
            save_mbop(&trained, out)?;
            println!("saved mbop components (k = {k}) to {}", out.display());
        }
        other => bail!("unknown --model {other:?} (proposal, dynamics, objective, mbop)"),
    }
    Ok(())
}

fn eval(config: &ExperimentConfig) -> Result<()> {
    let report = run_experiment(config)?;
    println!(
        "{} episodes: return {:.3} ± {:.3}, normalized score {:.2} ± {:.2}",
        report.episodes.len(),
        report.mean_return,
        report.stderr_return,
        report.mean_score,
        report.stderr_score,
    );
    println!("rows: {}", report.results_path.display());
    println!("summary: {}", report.summary_path.display());
    Ok(())
}

fn rollout_error(
    config: &ExperimentConfig,
    samples: Option<usize>,
    max_horizon: Option<usize>,
) -> Result<()> {
    let dataset = load_config_dataset(config)?;
    let dir = config
        .dynamics_dir
        .as_ref()
        .context("rollout-error needs `models.dynamics` pointing at a saved model")?;
    let model = load_dynamics(dir)?;
    let (default_samples, default_horizon) = rmsd_defaults(config.preset);
    let samples = samples.unwrap_or(default_samples);
    let max_horizon = max_horizon.unwrap_or(default_horizon);
    let curve = rmsd_study(&model, &dataset, max_horizon, samples, config.seed)?;

    std::fs::create_dir_all(&config.out_dir)?;
    let csv_path = config.out_dir.join("rmsd.csv");
    let mut csv = std::fs::File::create(&csv_path)?;
    writeln!(csv, "horizon,median,p10,p90")?;
    for (i, h) in curve.horizons.iter().enumerate() {
        writeln!(csv, "{h},{:.6},{:.6},{:.6}", curve.median[i], curve.p10[i], curve.p90[i])?;
    }

    let xs: Vec<f64> = curve.horizons.iter().map(|&h| h as f64).collect();
    let mut plot = LinePlot::new(
        &format!("{} rollout error", model.kind.as_str()),
        "horizon",
        "median RMSD",
    );
    plot.line("median", &xs, &curve.median);
    plot.band(&xs, &curve.p10, &curve.p90);
    let svg_path = config.out_dir.join("rmsd.svg");
    plot.save(&svg_path)?;

    println!(
        "{} windows ({} skipped), horizon {}: median RMSD {:.4} at deepest step",
        curve.samples,
        curve.skipped,
        max_horizon,
        curve.median.last().copied().unwrap_or(f64::NAN)
    );
    println!("curve: {}", csv_path.display());
    println!("plot: {}", svg_path.display());
    Ok(())
}

fn finetune(
    config: &ExperimentConfig,
    play_episodes: usize,
    steps: usize,
    batch: usize,
) -> Result<()> {
    let defect = config
        .defect
        .as_ref()
        .context("finetune needs a [defect] section (dim, fraction)")?;
    let dir = config
        .dynamics_dir
        .as_ref()
        .context("finetune needs `models.dynamics` pointing at a saved model")?;
    let model = load_dynamics(dir)?;

    config.validate()?;
    let assets = ExperimentAssets::load(config)?;
    let play = with_agent(&assets, config, |agent| {
        Ok(collect_play_data(&config.env, defect, agent, play_episodes, config.seed)?)
    })?;
    let play_dir = config.out_dir.join("play");
    save_dataset(&play, &play_dir)?;

    let ft_config = FinetuneConfig {
        play_episodes,
        train: TrainConfig::standard(steps, batch, config.seed),
    };
    let tuned = finetune_dynamics(&model, &play, config.preset, &ft_config)?;
    save_dynamics(&tuned, &config.out_dir)?;
    println!(
        "fine-tuned {} dynamics on {play_episodes} play episodes; saved to {}",
        model.kind.as_str(),
        config.out_dir.display()
    );
    println!("play data: {}", play_dir.display());
    Ok(())
}

fn run_distill(
    config: &ExperimentConfig,
    max_states: usize,
    steps: usize,
    batch: usize,
) -> Result<()> {
    let dataset = load_config_dataset(config)?;
    config.validate()?;
    let assets = ExperimentAssets::load(config)?;
    let tc = TrainConfig::standard(steps, batch, config.seed);
    let policy = with_agent(&assets, config, |agent| {
        Ok(distill(agent, &dataset, max_states, &tc)?)
    })?;
    save_proposal(&policy.policy, &config.out_dir)?;
    println!(
        "distilled {} planner into a reactive policy; saved to {}",
        config.choice.as_str(),
        config.out_dir.display()
    );
    Ok(())
}

fn bench(config: &ExperimentConfig, steps: usize) -> Result<()> {
    config.validate()?;
    let assets = ExperimentAssets::load(config)?;
    let timing = with_agent(&assets, config, |agent| {
        bench_timing(config.choice.as_str(), agent, &config.env, steps, config.seed)
    })?;
    println!(
        "{}: {:.3} ± {:.3} ms/step over {} steps",
        timing.label, timing.mean_ms, timing.stderr_ms, timing.steps
    );
    Ok(())
}

fn calibrate(config: &ExperimentConfig, episodes: usize) -> Result<()> {
    let refs = calibrate_refs(&config.env, episodes, config.seed)?;
    save_refs(&config.refs_path, config.env.name.as_str(), &refs)?;
    println!(
        "{}: random {:.3}, expert {:.3} over {episodes} episodes each -> {}",
        config.env.name.as_str(),
        refs.random,
        refs.expert,
        config.refs_path.display()
    );
    Ok(())
}
