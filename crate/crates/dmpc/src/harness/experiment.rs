//! Closed-loop experiment execution: load saved models, assemble the chosen
//! planner, run seeded episodes, and emit `results.csv`, `summary.csv`, and
//! per-episode trace SVGs.
//!
//! Episodes run sequentially (candidate scoring inside the planner is
//! already data-parallel) and each finished row is flushed to disk
//! immediately, so an interrupted run leaves a valid partial `results.csv`.

use super::config::{ExperimentConfig, PlannerChoice};
use super::score::{load_refs, normalized_score};
use super::svg::LinePlot;
use super::HarnessError;
use crate::models::{
    load_dynamics, load_mbop, load_objective, load_proposal, ActionProposal, DynamicsModel,
    MbopComponents, ModelError, ObjectiveModel,
};
use crate::planners::{
    mpc_run, Agent, EnvReturnObjective, EpisodeRecord, MbopAgent, Objective, PolicyAgent,
    SsrAgent, SsrDynamics,
};
use std::io::Write;
use std::path::PathBuf;

/// Models loaded for one experiment; only the pieces the planner choice
/// needs are populated.
#[derive(Default)]
pub struct ExperimentAssets {
    /// Action proposal (D-MPC).
    pub proposal: Option<ActionProposal>,
    /// Learned dynamics (D-MPC without the oracle flag).
    pub dynamics: Option<DynamicsModel>,
    /// Learned objective J (D-MPC without the oracle flag, κ > 0).
    pub objective: Option<ObjectiveModel>,
    /// MBOP component set.
    pub mbop: Option<MbopComponents>,
    /// Distilled reactive policy.
    pub policy: Option<ActionProposal>,
}

impl ExperimentAssets {
    /// Loads every model directory the config's planner choice requires.
    pub fn load(config: &ExperimentConfig) -> Result<ExperimentAssets, HarnessError> {
        let mut assets = ExperimentAssets::default();
        match config.choice {
            PlannerChoice::Dmpc => {
                let dir = config.proposal_dir.as_ref().ok_or_else(|| missing("models.proposal"))?;
                assets.proposal = Some(load_proposal(dir)?);
                if !config.oracle_dynamics {
                    let dir =
                        config.dynamics_dir.as_ref().ok_or_else(|| missing("models.dynamics"))?;
                    assets.dynamics = Some(load_dynamics(dir)?);
                }
                if !config.oracle_objective && config.planner.kappa > 0.0 {
                    let dir =
                        config.objective_dir.as_ref().ok_or_else(|| missing("models.objective"))?;
                    assets.objective = Some(load_objective(dir)?);
                }
            }
            PlannerChoice::Mbop => {
                let dir = config.mbop_dir.as_ref().ok_or_else(|| missing("models.mbop"))?;
                assets.mbop = Some(load_mbop(dir)?);
            }
            PlannerChoice::Distilled => {
                let dir = config.policy_dir.as_ref().ok_or_else(|| missing("models.policy"))?;
                assets.policy = Some(load_proposal(dir)?);
            }
        }
        Ok(assets)
    }
}

fn missing(key: &str) -> HarnessError {
    HarnessError::ConfigKey { key: key.into(), message: "missing (required by planner.kind)".into() }
}

/// Objective used when κ = 0 and candidates are ranked by J̃ alone; the
/// planner never evaluates it.
struct NullObjective;

impl Objective for NullObjective {
    fn score(
        &self,
        _state: &[f64],
        _states: &[Vec<f64>],
        _actions: &[Vec<f64>],
    ) -> Result<f64, ModelError> {
        Ok(0.0)
    }
}

/// Assembles the configured planner and hands it to `f`. The agent borrows
/// from `assets` and `config`, so it lives only inside the callback.
pub fn with_agent<T>(
    assets: &ExperimentAssets,
    config: &ExperimentConfig,
    f: impl FnOnce(&mut dyn Agent) -> Result<T, HarnessError>,
) -> Result<T, HarnessError> {
    match config.choice {
        PlannerChoice::Dmpc => {
            let proposal = assets.proposal.as_ref().ok_or_else(|| missing("models.proposal"))?;
            let dynamics = if config.oracle_dynamics {
                SsrDynamics::Env(&config.env)
            } else {
                SsrDynamics::Model(
                    assets.dynamics.as_ref().ok_or_else(|| missing("models.dynamics"))?,
                )
            };
            let null = NullObjective;
            let env_objective = EnvReturnObjective { spec: &config.env, gamma: config.gamma };
            let objective: &(dyn Objective + Sync) = if config.planner.kappa == 0.0 {
                &null
            } else if config.oracle_objective {
                &env_objective
            } else {
                assets.objective.as_ref().ok_or_else(|| missing("models.objective"))?
            };
            let mut agent = SsrAgent::new(
                proposal,
                dynamics,
                objective,
                config.novel.as_ref(),
                config.planner.clone(),
            );
            f(&mut agent)
        }
        PlannerChoice::Mbop => {
            let models = assets.mbop.as_ref().ok_or_else(|| missing("models.mbop"))?;
            let mut agent = MbopAgent::new(models, config.planner.clone());
            f(&mut agent)
        }
        PlannerChoice::Distilled => {
            let policy = assets.policy.as_ref().ok_or_else(|| missing("models.policy"))?;
            let mut agent = PolicyAgent { policy };
            f(&mut agent)
        }
    }
}

/// One finished episode as reported.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    /// Seed the episode ran under.
    pub seed: u64,
    /// Penalized return.
    pub total_reward: f64,
    /// Score against the calibrated references.
    pub normalized_score: f64,
    /// Steps taken.
    pub length: usize,
    /// Ended by leaving the valid region.
    pub terminated_early: bool,
    /// Rendered trace, when this episode was plotted.
    pub trace: Option<PathBuf>,
}

/// Everything `run_experiment` wrote and computed.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    /// Per-episode outcomes in run order.
    pub episodes: Vec<EpisodeResult>,
    /// Mean penalized return.
    pub mean_return: f64,
    /// Standard error of the return.
    pub stderr_return: f64,
    /// Mean normalized score.
    pub mean_score: f64,
    /// Standard error of the normalized score.
    pub stderr_score: f64,
    /// Where per-episode rows were written.
    pub results_path: PathBuf,
    /// Where the one-row summary was written.
    pub summary_path: PathBuf,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn render_trace(
    rec: &EpisodeRecord,
    config: &ExperimentConfig,
    index: usize,
) -> Result<PathBuf, HarnessError> {
    let steps: Vec<f64> = (0..rec.states.len()).map(|t| t as f64).collect();
    let mut plot = LinePlot::new(
        &format!("{} episode {index} (return {:.2})", config.env.name.as_str(), rec.total_reward),
        "step",
        "coordinate",
    );
    for (c, &is_velocity) in config.env.velocity_mask.iter().enumerate() {
        if is_velocity {
            continue;
        }
        let ys: Vec<f64> = rec.states.iter().map(|s| s[c]).collect();
        plot.line(&format!("s{c}"), &steps, &ys);
    }
    let path = config.out_dir.join(format!("trace_{index:03}.svg"));
    plot.save(&path)?;
    Ok(path)
}

/// Runs the configured experiment: seeded episodes through the assembled
/// planner, per-episode rows flushed to `results.csv` as they finish, a
/// one-row `summary.csv`, and SVG traces for the first few episodes.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let refs = load_refs(&config.refs_path, config.env.name.as_str())?;
    std::fs::create_dir_all(&config.out_dir)?;
    let assets = ExperimentAssets::load(config)?;

    let results_path = config.out_dir.join("results.csv");
    let summary_path = config.out_dir.join("summary.csv");
    let mut results = std::fs::File::create(&results_path)?;
    writeln!(results, "seed,return,normalized_score,length,terminated_early")?;
    results.flush()?;

    let seeds = config.resolved_seeds();
    let episodes = with_agent(&assets, config, |agent| {
        let mut episodes = Vec::with_capacity(seeds.len());
        for (i, &seed) in seeds.iter().enumerate() {
            let rec = mpc_run(&config.env, config.defect.as_ref(), agent, 1, seed)?
                .pop()
                .expect("one episode requested");
            debug_assert!(rec.length <= config.env.max_episode_len);
            let score = normalized_score(rec.total_reward, &refs);
            writeln!(
                results,
                "{seed},{:.6},{:.6},{},{}",
                rec.total_reward, score, rec.length, rec.terminated_early as u8
            )?;
            results.flush()?;
            let trace =
                if i < config.traces { Some(render_trace(&rec, config, i)?) } else { None };
            episodes.push(EpisodeResult {
                seed,
                total_reward: rec.total_reward,
                normalized_score: score,
                length: rec.length,
                terminated_early: rec.terminated_early,
                trace,
            });
        }
        Ok(episodes)
    })?;

    let returns: Vec<f64> = episodes.iter().map(|e| e.total_reward).collect();
    let scores: Vec<f64> = episodes.iter().map(|e| e.normalized_score).collect();
    let (mean_return, stderr_return) = mean_stderr(&returns);
    let (mean_score, stderr_score) = mean_stderr(&scores);

    let mut summary = std::fs::File::create(&summary_path)?;
    writeln!(
        summary,
        "episodes,mean_return,stderr_return,mean_normalized_score,stderr_normalized_score"
    )?;
    writeln!(
        summary,
        "{},{mean_return:.6},{stderr_return:.6},{mean_score:.6},{stderr_score:.6}",
        episodes.len()
    )?;

    Ok(ExperimentReport {
        episodes,
        mean_return,
        stderr_return,
        mean_score,
        stderr_score,
        results_path,
        summary_path,
    })
}
