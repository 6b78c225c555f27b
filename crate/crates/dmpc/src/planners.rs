//! Planners: the sample-score-rank (SSR) loop, the MBOP-TrajOpt baseline,
//! novel-reward composition, and the outer MPC driver.
//!
//! SSR draws N candidate action sequences from the proposal, predicts the
//! visited states with a dynamics model, scores each candidate with
//! V = κ·J + κ̃·J̃, and executes the first action of the argmax candidate
//! (lowest index on ties). Candidates with non-finite predictions or scores
//! are dropped; planning fails only if every candidate drops.

use crate::envs::{apply_defect, reset, step, DefectSpec, EnvSpec, EnvState};
use crate::exec::par_map;
use crate::models::{
    ActionProposal, DynamicsModel, MbopModel, ModelError, ObjectiveModel, ProposalKind,
};
use crate::tensor::TensorError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Errors from planning and episode rollout.
#[derive(Debug, Error)]
pub enum PlannerError {
    /// Propagated model failure.
    #[error(transparent)]
    Model(#[from] ModelError),
    /// Propagated environment failure.
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    /// Every candidate was dropped for non-finite predictions or scores.
    #[error("planning failed: all {0} candidates dropped as non-finite")]
    AllCandidatesDropped(usize),
    /// Invalid configuration.
    #[error("invalid planner configuration: {0}")]
    Invalid(String),
}

impl From<TensorError> for PlannerError {
    fn from(e: TensorError) -> Self {
        PlannerError::Model(ModelError::Tensor(e))
    }
}

/// Settings shared by both planners.
#[derive(Debug, Clone)]
pub struct PlannerConfig {
    /// Candidate count N.
    pub samples: usize,
    /// Forecast horizon F.
    pub horizon: usize,
    /// History length H (1 = condition on the current state only).
    pub history: usize,
    /// Weight κ on the trained objective J.
    pub kappa: f64,
    /// Weight κ̃ on the novel objective J̃.
    pub kappa_novel: f64,
    /// MBOP softmax temperature.
    pub mbop_kappa: f64,
    /// MBOP exploration noise variance σ².
    pub mbop_sigma2: f64,
    /// MBOP action smoothing β ∈ [0, 1].
    pub mbop_beta: f64,
    /// Actions executed per plan (1 = replan every step).
    pub chunk: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            samples: 64,
            horizon: 32,
            history: 1,
            kappa: 1.0,
            kappa_novel: 0.0,
            mbop_kappa: 1.0,
            mbop_sigma2: 0.01,
            mbop_beta: 0.0,
            chunk: 1,
        }
    }
}

impl PlannerConfig {
    /// Checks the invariants shared by both planners.
    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.samples == 0 {
            return Err(PlannerError::Invalid("need at least one sample".into()));
        }
        if self.horizon == 0 {
            return Err(PlannerError::Invalid("horizon must be at least 1".into()));
        }
        if self.history == 0 {
            return Err(PlannerError::Invalid("history must be at least 1".into()));
        }
        if self.kappa < 0.0 || self.kappa_novel < 0.0 || self.kappa + self.kappa_novel == 0.0 {
            return Err(PlannerError::Invalid(
                "objective weights must be non-negative and not both zero".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mbop_beta) {
            return Err(PlannerError::Invalid("smoothing beta must lie in [0, 1]".into()));
        }
        if self.chunk == 0 {
            return Err(PlannerError::Invalid("chunk must be at least 1".into()));
        }
        Ok(())
    }
}

/// A novel per-step reward used to steer a pretrained planner.
#[derive(Debug, Clone)]
pub enum NovelObjective {
    /// scale · exp(−(s[coord] − target)² / (2·variance)).
    GaussianOnCoordinate {
        /// State coordinate the reward reads.
        coord: usize,
        /// Preferred coordinate value.
        target: f64,
        /// Gaussian variance σ².
        variance: f64,
        /// Peak reward.
        scale: f64,
    },
    /// Always zero (ablation stub).
    ConstantZero,
}

impl NovelObjective {
    fn step_value(&self, state: &[f64]) -> f64 {
        match self {
            NovelObjective::GaussianOnCoordinate { coord, target, variance, scale } => {
                let d = state[*coord] - target;
                scale * (-d * d / (2.0 * variance)).exp()
            }
            NovelObjective::ConstantZero => 0.0,
        }
    }
}

/// J̃: the novel reward averaged over the predicted horizon.
pub fn eval_novel_objective(
    objective: &NovelObjective,
    states: &[Vec<f64>],
    _actions: &[Vec<f64>],
) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    states.iter().map(|s| objective.step_value(s)).sum::<f64>() / states.len() as f64
}

/// Scoring interface for SSR, so oracles and stubs can replace the trained J.
pub trait Objective {
    /// Scores one candidate: current state, F predicted states, F actions.
    fn score(
        &self,
        state: &[f64],
        states: &[Vec<f64>],
        actions: &[Vec<f64>],
    ) -> Result<f64, ModelError>;
}

impl Objective for ObjectiveModel {
    fn score(
        &self,
        state: &[f64],
        states: &[Vec<f64>],
        actions: &[Vec<f64>],
    ) -> Result<f64, ModelError> {
        ObjectiveModel::score(self, state, states, actions)
    }
}

/// The true discounted return over the horizon, computed by replaying the
/// candidate through the real environment (the oracle J for planner
/// calibration).
#[derive(Debug, Clone)]
pub struct EnvReturnObjective<'a> {
    /// Environment to replay in.
    pub spec: &'a EnvSpec,
    /// Discount γ.
    pub gamma: f64,
}

impl Objective for EnvReturnObjective<'_> {
    fn score(
        &self,
        state: &[f64],
        _states: &[Vec<f64>],
        actions: &[Vec<f64>],
    ) -> Result<f64, ModelError> {
        let mut env = EnvState { state: state.to_vec(), step_index: 0, terminated: false };
        let mut total = 0.0;
        let mut discount = 1.0;
        for a in actions {
            let out = step(self.spec, &env, a)
                .map_err(|e| ModelError::Invalid(format!("oracle replay: {e}")))?;
            total += discount * out.reward;
            discount *= self.gamma;
            env = out.state;
            if out.terminated {
                break;
            }
        }
        Ok(total)
    }
}

/// State predictor used by SSR: a learned dynamics model or the real
/// environment (oracle).
#[derive(Clone, Copy)]
pub enum SsrDynamics<'a> {
    /// A trained dynamics model.
    Model(&'a DynamicsModel),
    /// The true environment dynamics.
    Env(&'a EnvSpec),
}

impl SsrDynamics<'_> {
    fn rollout(
        &self,
        state: &[f64],
        actions: &[Vec<f64>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        match self {
            SsrDynamics::Model(m) => m.rollout(state, actions, rng),
            SsrDynamics::Env(spec) => {
                let mut env = EnvState { state: state.to_vec(), step_index: 0, terminated: false };
                let mut out = Vec::with_capacity(actions.len());
                for a in actions {
                    if env.terminated {
                        // Freeze the terminal state so the output stays F long.
                        out.push(env.state.clone());
                        continue;
                    }
                    let o = step(spec, &env, a)
                        .map_err(|e| ModelError::Invalid(format!("oracle rollout: {e}")))?;
                    env = o.state;
                    out.push(env.state.clone());
                }
                Ok(out)
            }
        }
    }

    fn as_model(&self) -> Option<&DynamicsModel> {
        match self {
            SsrDynamics::Model(m) => Some(m),
            SsrDynamics::Env(_) => None,
        }
    }
}

/// Everything one SSR call produced.
#[derive(Debug, Clone)]
pub struct PlanResult {
    /// Candidate action sequences, N × F × action dim.
    pub actions: Vec<Vec<Vec<f64>>>,
    /// Predicted states per candidate, N × F × state dim.
    pub states: Vec<Vec<Vec<f64>>>,
    /// V_n per candidate; dropped candidates hold −∞.
    pub scores: Vec<f64>,
    /// Argmax index (lowest index on ties).
    pub chosen: usize,
    /// First action of the chosen candidate.
    pub first_action: Vec<f64>,
}

/// Lowest-index argmax over finite scores.
fn rank(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in scores.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        match best {
            Some(b) if scores[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// One sample-score-rank planning call.
#[allow(clippy::too_many_arguments)]
pub fn ssr_plan(
    state: &[f64],
    history: &[(Vec<f64>, Vec<f64>)],
    proposal: &ActionProposal,
    dynamics: SsrDynamics<'_>,
    objective: &(dyn Objective + Sync),
    novel: Option<&NovelObjective>,
    config: &PlannerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PlanResult, PlannerError> {
    config.validate()?;
    let n = config.samples;
    let proposals = proposal.propose(state, history, n, dynamics.as_model(), rng)?;
    let actions = proposals.actions;

    // ss-kind proposals already produced states while composing; otherwise
    // roll each candidate through the dynamics with a pre-drawn seed so the
    // parallel reduction stays in candidate-index order.
    let states: Vec<Result<Vec<Vec<f64>>, ModelError>> = match proposals.states {
        Some(s) => s.into_iter().map(Ok).collect(),
        None => {
            let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
            par_map(n, |i| {
                let mut crng = ChaCha8Rng::seed_from_u64(seeds[i]);
                dynamics.rollout(state, &actions[i], &mut crng)
            })
        }
    };

    let mut resolved_states = Vec::with_capacity(n);
    let mut dropped = vec![false; n];
    for (i, s) in states.into_iter().enumerate() {
        match s {
            Ok(s) => {
                dropped[i] = s.iter().flatten().any(|v| !v.is_finite());
                resolved_states.push(s);
            }
            Err(ModelError::NonFinite(_)) => {
                dropped[i] = true;
                resolved_states.push(vec![vec![0.0; state.len()]; config.horizon]);
            }
            Err(e) => return Err(e.into()),
        }
    }

    let score_results: Vec<Result<f64, ModelError>> = par_map(n, |i| {
        if dropped[i] {
            return Ok(f64::NEG_INFINITY);
        }
        let mut v = 0.0;
        if config.kappa > 0.0 {
            v += config.kappa * objective.score(state, &resolved_states[i], &actions[i])?;
        }
        if config.kappa_novel > 0.0 {
            let novel = novel.ok_or_else(|| {
                ModelError::Invalid("kappa_novel > 0 requires a novel objective".into())
            })?;
            v += config.kappa_novel
                * eval_novel_objective(novel, &resolved_states[i], &actions[i]);
        }
        Ok(v)
    });
    let mut scores = Vec::with_capacity(n);
    for r in score_results {
        match r {
            Ok(v) if v.is_finite() => scores.push(v),
            Ok(_) | Err(ModelError::NonFinite(_)) => scores.push(f64::NEG_INFINITY),
            Err(e) => return Err(e.into()),
        }
    }

    let chosen = if n == 1 {
        0
    } else {
        rank(&scores).ok_or(PlannerError::AllCandidatesDropped(n))?
    };
    let first_action = actions[chosen][0].clone();
    Ok(PlanResult { actions, states: resolved_states, scores, chosen, first_action })
}

/// One MBOP-TrajOpt planning call. Returns the full smoothed trajectory; the
/// caller executes element 0 and passes the trajectory back as `a_prev`.
pub fn mbop_trajopt(
    state: &[f64],
    a_prev: &[Vec<f64>],
    models: &dyn MbopModel,
    config: &PlannerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, PlannerError> {
    config.validate()?;
    let n = config.samples;
    let f = config.horizon;
    let m = models.action_dim();
    let k = models.ensemble_size();
    if a_prev.len() != f {
        return Err(PlannerError::Invalid(format!(
            "a_prev must hold {f} actions, got {}",
            a_prev.len()
        )));
    }
    let sigma = config.mbop_sigma2.sqrt();
    let beta = config.mbop_beta;

    let mut rewards = vec![0.0; n];
    // Candidate action matrix A, row n = smoothed actions A_{n,1..F}.
    let mut smoothed = vec![vec![vec![0.0; m]; f]; n];
    for cand in 0..n {
        let l = (cand + 1) % k;
        let mut s = state.to_vec();
        let mut a_last = a_prev[0].clone();
        let mut total = 0.0;
        for t in 1..=f {
            let mut a = models.prop(l, &s, &a_last)?;
            for v in a.iter_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
            let prev_ref = &a_prev[t.min(f - 1)];
            let smooth: Vec<f64> = a
                .iter()
                .zip(prev_ref)
                .map(|(ai, pi)| (1.0 - beta) * ai + beta * pi)
                .collect();
            total += models.mean_reward(&s, &smooth)?;
            s = models.step(l, &s, &smooth)?;
            smoothed[cand][t - 1] = smooth;
            a_last = a;
        }
        rewards[cand] = total + models.mean_value(&s, &smoothed[cand][f - 1])?;
    }

    // Softmax-weighted average, shifted by the max for overflow safety
    // (invariant under constant shifts).
    let max_r = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_r.is_finite() {
        return Err(PlannerError::AllCandidatesDropped(n));
    }
    let weights: Vec<f64> =
        rewards.iter().map(|r| (config.mbop_kappa * (r - max_r)).exp()).collect();
    let denom: f64 = weights.iter().sum();

    // Output trajectory a_t = Σ_n w_n · A_{n,t+1}: slot j of `smoothed`
    // already holds A_{n,j+1}, so the one-step shift is built in.
    let mut out = vec![vec![0.0; m]; f];
    for (t, slot) in out.iter_mut().enumerate() {
        for (cand, w) in weights.iter().enumerate() {
            for (j, v) in slot.iter_mut().enumerate() {
                *v += w * smoothed[cand][t][j] / denom;
            }
        }
    }
    Ok(out)
}

/// A closed-loop controller: one action per step, internal state reset per
/// episode.
pub trait Agent {
    /// Chooses the action for the current raw state.
    fn act(&mut self, state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, PlannerError>;
    /// Clears per-episode state (history, buffered actions).
    fn reset(&mut self) {}
}

/// SSR planning agent (D-MPC when all three models are the diffusion ones).
pub struct SsrAgent<'a> {
    /// Action proposal.
    pub proposal: &'a ActionProposal,
    /// State predictor.
    pub dynamics: SsrDynamics<'a>,
    /// Candidate scorer.
    pub objective: &'a (dyn Objective + Sync),
    /// Optional novel reward J̃.
    pub novel: Option<&'a NovelObjective>,
    /// Planner settings.
    pub config: PlannerConfig,
    history: Vec<(Vec<f64>, Vec<f64>)>,
    buffered: Vec<Vec<f64>>,
}

impl<'a> SsrAgent<'a> {
    /// Builds an agent with empty history.
    pub fn new(
        proposal: &'a ActionProposal,
        dynamics: SsrDynamics<'a>,
        objective: &'a (dyn Objective + Sync),
        novel: Option<&'a NovelObjective>,
        config: PlannerConfig,
    ) -> Self {
        SsrAgent { proposal, dynamics, objective, novel, config, history: Vec::new(), buffered: Vec::new() }
    }

    /// History pairs currently kept (at most H−1; empty when H=1).
    pub fn history_len(&self) -> usize {
        self.history.len()
    }
}

impl Agent for SsrAgent<'_> {
    fn act(&mut self, state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, PlannerError> {
        if self.buffered.is_empty() {
            let plan = ssr_plan(
                state,
                &self.history,
                self.proposal,
                self.dynamics,
                self.objective,
                self.novel,
                &self.config,
                rng,
            )?;
            let take = self.config.chunk.min(self.config.horizon);
            self.buffered = plan.actions[plan.chosen][..take].to_vec();
            self.buffered.reverse();
        }
        let action = self.buffered.pop().expect("buffer refilled above");
        self.history.push((state.to_vec(), action.clone()));
        let keep = self.config.history.saturating_sub(1);
        let drop = self.history.len().saturating_sub(keep);
        self.history.drain(..drop);
        Ok(action)
    }

    fn reset(&mut self) {
        self.history.clear();
        self.buffered.clear();
    }
}

/// MBOP-TrajOpt planning agent.
pub struct MbopAgent<'a> {
    /// Component set.
    pub models: &'a (dyn MbopModel + Sync),
    /// Planner settings.
    pub config: PlannerConfig,
    a_prev: Vec<Vec<f64>>,
}

impl<'a> MbopAgent<'a> {
    /// Builds an agent with a zero previous trajectory.
    pub fn new(models: &'a (dyn MbopModel + Sync), config: PlannerConfig) -> Self {
        let a_prev = vec![vec![0.0; models.action_dim()]; config.horizon];
        MbopAgent { models, config, a_prev }
    }
}

impl Agent for MbopAgent<'_> {
    fn act(&mut self, state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, PlannerError> {
        let traj = mbop_trajopt(state, &self.a_prev, self.models, &self.config, rng)?;
        self.a_prev = traj;
        Ok(self.a_prev[0].clone())
    }

    fn reset(&mut self) {
        self.a_prev = vec![vec![0.0; self.models.action_dim()]; self.config.horizon];
    }
}

/// Reactive single-forward policy agent (a distilled ss-mlp proposal).
pub struct PolicyAgent<'a> {
    /// The policy; must be a single-step kind.
    pub policy: &'a ActionProposal,
}

impl Agent for PolicyAgent<'_> {
    fn act(&mut self, state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, PlannerError> {
        if self.policy.kind == ProposalKind::MsDiff {
            return Err(PlannerError::Invalid("reactive policy must be single-step".into()));
        }
        Ok(self.policy.propose_one(state, rng)?)
    }
}

/// One finished episode.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    /// Sum of per-step rewards, termination penalty included.
    pub total_reward: f64,
    /// Steps taken.
    pub length: usize,
    /// Ended by leaving the valid region.
    pub terminated_early: bool,
    /// Visited states (length + 1 entries, starting at reset).
    pub states: Vec<Vec<f64>>,
    /// Commanded actions as the agent produced them (not clipped).
    pub actions: Vec<Vec<f64>>,
    /// Raw rewards per step (no penalty).
    pub raw_rewards: Vec<f64>,
}

/// Runs seeded closed-loop episodes: plan, execute the first action, replan.
pub fn mpc_run(
    spec: &EnvSpec,
    defect: Option<&DefectSpec>,
    agent: &mut dyn Agent,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeRecord>, PlannerError> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let reset_seed = master.gen::<u64>();
        let mut rng = ChaCha8Rng::seed_from_u64(master.gen::<u64>());
        let mut env = reset(spec, reset_seed);
        agent.reset();
        let mut rec = EpisodeRecord {
            total_reward: 0.0,
            length: 0,
            terminated_early: false,
            states: vec![env.state.clone()],
            actions: Vec::new(),
            raw_rewards: Vec::new(),
        };
        while !env.terminated {
            let commanded = agent.act(&env.state, &mut rng)?;
            let executed = match defect {
                Some(d) => apply_defect(d, spec, &commanded),
                None => commanded.clone(),
            };
            let outcome = step(spec, &env, &executed)?;
            rec.total_reward += outcome.reward;
            rec.length += 1;
            rec.terminated_early = outcome.terminated_early;
            rec.states.push(outcome.state.state.clone());
            rec.actions.push(commanded);
            rec.raw_rewards.push(outcome.raw_reward);
            env = outcome.state;
        }
        out.push(rec);
    }
    Ok(out)
}
