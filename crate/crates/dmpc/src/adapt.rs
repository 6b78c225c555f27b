//! Test-time adaptation: play-data collection under an actuator defect,
//! dynamics-only fine-tuning, and distillation of a planner into a reactive
//! MLP policy.
//!
//! The adaptation story is deliberately component-local: when the plant
//! changes (a defect), only the dynamics model is retrained on fresh play
//! data while the action proposal and objective stay byte-identical; when
//! latency matters, the whole planner is distilled into a single-forward
//! policy supervised by its own planned actions.

use crate::data::{DataError, Dataset, Normalizer, Quality, Trajectory};
use crate::envs::{DefectSpec, EnvSpec};
use crate::models::{
    train_batched_init, ActionProposal, DynamicsModel, ModelError, Preset, ProposalKind,
    TrainConfig,
};
use crate::planners::{mpc_run, Agent, PlannerError, PolicyAgent};
use crate::tensor::{tape_mlp, IoSpec, NetworkSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Episodes of play data collected by default.
pub const DEFAULT_PLAY_EPISODES: usize = 100;

/// Errors from the adaptation pipeline.
#[derive(Debug, Error)]
pub enum AdaptError {
    /// Propagated planner failure during collection or supervision.
    #[error(transparent)]
    Planner(#[from] PlannerError),
    /// Propagated model failure during training.
    #[error(transparent)]
    Model(#[from] ModelError),
    /// Propagated dataset failure.
    #[error(transparent)]
    Data(#[from] DataError),
    /// Invalid adaptation request.
    #[error("invalid adaptation request: {0}")]
    Invalid(String),
}

/// Settings for defect adaptation.
#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    /// Play episodes to collect before fine-tuning.
    pub play_episodes: usize,
    /// Optimization settings for the fine-tune run; the schedule restarts
    /// fresh, truncated to this step budget.
    pub train: TrainConfig,
}

impl FinetuneConfig {
    /// Default budgets: 100 play episodes, 20k fine-tune steps.
    pub fn standard(seed: u64) -> Self {
        FinetuneConfig { play_episodes: DEFAULT_PLAY_EPISODES, train: TrainConfig::standard(20_000, 8, seed) }
    }
}

/// Runs the agent on the defective environment and records the interaction
/// as a play-quality dataset. Stored actions are the agent's commanded
/// actions, not the clipped executed ones, so the dataset shows the planner
/// what its commands actually did to the plant.
pub fn collect_play_data(
    spec: &EnvSpec,
    defect: &DefectSpec,
    agent: &mut dyn Agent,
    episodes: usize,
    seed: u64,
) -> Result<Dataset, AdaptError> {
    let records = mpc_run(spec, Some(defect), agent, episodes, seed)?;
    let episodes = records
        .into_iter()
        .map(|r| {
            let steps = r.length;
            Trajectory {
                states: r.states[..steps].to_vec(),
                actions: r.actions,
                rewards: r.raw_rewards,
                terminated_early: r.terminated_early,
            }
        })
        .collect();
    Ok(Dataset {
        env: spec.name,
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        quality: Quality::Play,
        seed,
        episodes,
    })
}

/// Fine-tunes only the dynamics model on play data, continuing from its
/// current parameters with a fresh optimizer. The proposal and objective are
/// not inputs, so they cannot change: adaptation is dynamics-local.
pub fn finetune_dynamics(
    model: &DynamicsModel,
    play: &Dataset,
    preset: Preset,
    config: &FinetuneConfig,
) -> Result<DynamicsModel, AdaptError> {
    if play.quality != Quality::Play {
        return Err(AdaptError::Invalid(format!(
            "fine-tuning expects play-quality data, got {:?}",
            play.quality
        )));
    }
    Ok(model.finetune(play, preset, &config.train)?)
}

/// A reactive policy distilled from a planner: one MLP forward per action,
/// no planner invocation at inference time.
#[derive(Debug, Clone)]
pub struct DistilledPolicy {
    /// The underlying single-step policy.
    pub policy: ActionProposal,
}

impl DistilledPolicy {
    /// One action for one state (single forward pass).
    pub fn act(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, ModelError> {
        self.policy.propose_one(state, rng)
    }

    /// Wraps the policy as a closed-loop agent.
    pub fn agent(&self) -> PolicyAgent<'_> {
        PolicyAgent { policy: &self.policy }
    }
}

/// Distills a planner into an MLP policy by MSE regression from dataset
/// states to the actions the planner chooses at those states. The
/// environment is never queried: supervision is purely offline. The returned
/// policy uses the final optimizer checkpoint, not the EMA weights.
pub fn distill(
    agent: &mut dyn Agent,
    dataset: &Dataset,
    max_states: usize,
    config: &TrainConfig,
) -> Result<DistilledPolicy, AdaptError> {
    if max_states == 0 {
        return Err(AdaptError::Invalid("max_states must be at least 1".into()));
    }
    let all_states: Vec<&Vec<f64>> =
        dataset.episodes.iter().flat_map(|e| e.states.iter()).collect();
    if all_states.is_empty() {
        return Err(AdaptError::Invalid("distillation dataset holds no states".into()));
    }
    let stride = all_states.len().div_ceil(max_states);
    let support: Vec<Vec<f64>> =
        all_states.iter().step_by(stride).map(|s| (*s).clone()).collect();

    // Label each state with the planner's chosen action. The agent is reset
    // per query so chunk buffers and history from one state cannot leak into
    // the next.
    let mut label_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd157_111f);
    let mut targets = Vec::with_capacity(support.len());
    for s in &support {
        agent.reset();
        targets.push(agent.act(s, &mut label_rng)?);
    }

    let normalizer = Normalizer::fit(dataset)?;
    let norm_states: Vec<Vec<f64>> = support.iter().map(|s| normalizer.normalize(s)).collect();
    let spec = NetworkSpec {
        layers: 2,
        token_dim: 1,
        heads: 1,
        qkv_dim: 1,
        hidden_dim: 512,
        fourier_bases: 1,
        io: IoSpec::Mlp { input_dim: dataset.state_dim, output_dim: dataset.action_dim },
    };
    let state_dim = dataset.state_dim;
    let action_dim = dataset.action_dim;
    let batch = config.batch;
    let spec_clone = spec.clone();
    let init = spec.init_params(config.seed).map_err(ModelError::Tensor)?;
    let trained = train_batched_init(config, init, move |tape, ids, params, rng| {
        let mut xs = Vec::with_capacity(batch * state_dim);
        let mut ys = Vec::with_capacity(batch * action_dim);
        for _ in 0..batch {
            let i = rng.gen_range(0..norm_states.len());
            xs.extend_from_slice(&norm_states[i]);
            ys.extend_from_slice(&targets[i]);
        }
        let x = tape.leaf(Tensor::matrix(batch, state_dim, xs)?);
        let pred = tape_mlp(tape, &spec_clone, ids, params, x)?;
        let target = tape.leaf(Tensor::matrix(batch, action_dim, ys)?);
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        Ok(tape.mean_all(sq))
    })?;

    let env = EnvSpec::for_name(dataset.env);
    let policy = ActionProposal::from_parts(
        ProposalKind::SsMlp,
        spec,
        trained.last,
        normalizer,
        1,
        env.action_bounds,
    );
    Ok(DistilledPolicy { policy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, make_windows, PolicyKind};
    use crate::models::DynamicsKind;
    use crate::tensor::{param_fingerprint, TrainSchedule};

    /// Agent that always commands the same action.
    struct ConstantAgent(Vec<f64>);

    impl Agent for ConstantAgent {
        fn act(&mut self, _state: &[f64], _rng: &mut ChaCha8Rng) -> Result<Vec<f64>, PlannerError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn play_data_defaults_and_budgets() {
        let cfg = FinetuneConfig::standard(0);
        assert_eq!(cfg.play_episodes, 100);
        assert_eq!(cfg.train.steps, 20_000);
        assert_eq!(DEFAULT_PLAY_EPISODES, 100);
    }

    #[test]
    fn play_data_records_commanded_actions_beyond_defect_clip() {
        let env = EnvSpec::pointmass2d();
        let defect = DefectSpec { dim: 1, fraction: 0.5 };
        let mut agent = ConstantAgent(vec![0.9, 0.9]);
        let ds = collect_play_data(&env, &defect, &mut agent, 3, 11).unwrap();
        assert_eq!(ds.quality, Quality::Play);
        assert_eq!(ds.episodes.len(), 3);
        for ep in &ds.episodes {
            assert_eq!(ep.states.len(), ep.actions.len());
            assert_eq!(ep.rewards.len(), ep.actions.len());
            // Commanded y-action exceeds the defect clip of 0.5 everywhere.
            assert!(ep.actions.iter().all(|a| a[1] == 0.9));
            // But the states show the clipped actuation: y lags x.
            let last = ep.states.last().unwrap();
            assert!(last[0] > last[1], "defective dynamics should slow y: {last:?}");
            assert!(ep.states.iter().flatten().all(|v| v.is_finite()));
        }
        ds.validate().unwrap();
    }

    #[test]
    fn play_data_is_deterministic_in_the_seed() {
        let env = EnvSpec::pointmass2d();
        let defect = DefectSpec { dim: 1, fraction: 0.5 };
        let mut a1 = ConstantAgent(vec![0.4, 0.8]);
        let mut a2 = ConstantAgent(vec![0.4, 0.8]);
        let d1 = collect_play_data(&env, &defect, &mut a1, 4, 99).unwrap();
        let d2 = collect_play_data(&env, &defect, &mut a2, 4, 99).unwrap();
        for (e1, e2) in d1.episodes.iter().zip(&d2.episodes) {
            assert_eq!(e1.states, e2.states);
            assert_eq!(e1.actions, e2.actions);
            assert_eq!(e1.rewards, e2.rewards);
        }
    }

    /// Goal-seeking scripted controller wrapped as an agent; under a defect
    /// its commanded actions exceed what the actuator delivers.
    struct ScriptedAgent(EnvSpec);

    impl Agent for ScriptedAgent {
        fn act(&mut self, state: &[f64], _rng: &mut ChaCha8Rng) -> Result<Vec<f64>, PlannerError> {
            Ok(crate::data::scripted_action(&self.0, state))
        }
    }

    #[test]
    fn finetune_improves_one_step_error_and_is_dynamics_local() {
        let env = EnvSpec::pointmass2d();
        let defect = DefectSpec { dim: 1, fraction: 0.4 };

        // Pretrain single-step dynamics on clean medium data.
        let clean = generate_dataset(&env, PolicyKind::ScriptedNoisy, 12, 5);
        let cfg = TrainConfig {
            schedule: TrainSchedule {
                warmup_steps: 50,
                peak_lr: 3e-3,
                final_lr: 3e-4,
                total_steps: 500,
            },
            ..TrainConfig::standard(500, 64, 5)
        };
        let model =
            DynamicsModel::train(&clean, DynamicsKind::SsMlp, Preset::Desk, 1, &cfg).unwrap();

        // Collect defective play data with the goal-seeking controller (its
        // commanded y-thrust routinely exceeds the defect clip), fine-tune on
        // it.
        let mut agent = ScriptedAgent(env.clone());
        let play = collect_play_data(&env, &defect, &mut agent, 6, 21).unwrap();
        let ft_cfg = FinetuneConfig {
            play_episodes: 6,
            train: TrainConfig {
                schedule: TrainSchedule {
                    warmup_steps: 50,
                    peak_lr: 1e-3,
                    final_lr: 1e-4,
                    total_steps: 400,
                },
                ..TrainConfig::standard(400, 64, 9)
            },
        };
        let tuned = finetune_dynamics(&model, &play, Preset::Desk, &ft_cfg).unwrap();
        assert_ne!(
            param_fingerprint(&model.params),
            param_fingerprint(&tuned.params),
            "fine-tuning must move the dynamics parameters"
        );

        // Held-out defective transitions: one-step error should drop.
        let mut agent2 = ScriptedAgent(env.clone());
        let held = collect_play_data(&env, &defect, &mut agent2, 2, 77).unwrap();
        let windows = make_windows(&held, 1, 1, 0.99, 100.0).unwrap();
        let mse = |m: &DynamicsModel| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut total = 0.0;
            for w in &windows {
                let pred = m.step_one(&w.state, &w.actions[0], &mut rng).unwrap();
                total += pred
                    .iter()
                    .zip(&w.next_states[0])
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>();
            }
            total / windows.len() as f64
        };
        let before = mse(&model);
        let after = mse(&tuned);
        assert!(
            after < before,
            "fine-tune should reduce held-out defect error: {after} !< {before}"
        );
    }

    #[test]
    fn finetune_rejects_non_play_data() {
        let env = EnvSpec::pointmass2d();
        let clean = generate_dataset(&env, PolicyKind::ScriptedNoisy, 3, 5);
        let cfg = TrainConfig::standard(20, 8, 5);
        let model =
            DynamicsModel::train(&clean, DynamicsKind::SsMlp, Preset::Desk, 1, &cfg).unwrap();
        let err =
            finetune_dynamics(&model, &clean, Preset::Desk, &FinetuneConfig::standard(0))
                .unwrap_err();
        assert!(matches!(err, AdaptError::Invalid(_)));
    }

    #[test]
    fn distilled_policy_matches_constant_stub_planner() {
        let env = EnvSpec::pointmass2d();
        let dataset = generate_dataset(&env, PolicyKind::ScriptedNoisy, 2, 13);
        let target = vec![0.3, -0.4];
        let mut stub = ConstantAgent(target.clone());
        let cfg = TrainConfig {
            schedule: TrainSchedule {
                warmup_steps: 100,
                peak_lr: 1e-2,
                final_lr: 1e-6,
                total_steps: 4000,
            },
            ..TrainConfig::standard(4000, 64, 3)
        };
        // max_states exceeds the state count, so every dataset state is in
        // the training support.
        let distilled = distill(&mut stub, &dataset, 1000, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for ep in &dataset.episodes {
            for s in &ep.states {
                let a = distilled.act(s, &mut rng).unwrap();
                for (got, want) in a.iter().zip(&target) {
                    assert!(
                        (got - want).abs() <= 1e-3,
                        "distilled {got} vs constant {want} at state {s:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn distillation_is_deterministic() {
        let env = EnvSpec::pointmass2d();
        let dataset = generate_dataset(&env, PolicyKind::ScriptedNoisy, 3, 13);
        let cfg = TrainConfig::standard(40, 16, 3);
        let mut s1 = ConstantAgent(vec![0.1, 0.2]);
        let mut s2 = ConstantAgent(vec![0.1, 0.2]);
        let d1 = distill(&mut s1, &dataset, 100, &cfg).unwrap();
        let d2 = distill(&mut s2, &dataset, 100, &cfg).unwrap();
        assert_eq!(
            param_fingerprint(&d1.policy.params),
            param_fingerprint(&d2.policy.params)
        );
    }
}
