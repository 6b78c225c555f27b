//! Learned dynamics models: given a start state and a sequence of actions,
//! predict the visited states.
//!
//! Four kinds: `ss-mlp` (deterministic one-step MLP), `ss-diff` (one-step
//! diffusion, 3 denoising steps), `ms-diff` (joint F-step diffusion, 10
//! denoising steps), and `art` (causal transformer over interleaved
//! state/action tokens). All kinds consume and produce raw states at the
//! public interface and work in ECDF-normalized space internally.

use super::denoise::{dsm_loss_one, sample_block};
use super::train::{train_accumulated, TrainConfig, TrainedNet};
use super::{ModelError, Preset};
use crate::data::{make_windows, Dataset, Normalizer};
use crate::diffusion::{DiffusionSchedule, SampleBounds};
use crate::tensor::{
    causal_forward, causal_mask, mlp_forward, tape_causal, IoSpec, NetworkSpec, ParamSet, Tensor,
    TokenRole,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Which dynamics architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicsKind {
    /// Deterministic MLP s_{t+1} = f(s_t, a_t).
    SsMlp,
    /// Single-step diffusion p(s_{t+1}|s_t, a_t), 3 denoising steps.
    SsDiff,
    /// Joint multi-step diffusion p(s_{t+1:t+F}|s_t, a_{t:t+F−1}), 10 steps.
    MsDiff,
    /// Autoregressive causal transformer over (s, a) token pairs.
    Art,
}

impl DynamicsKind {
    /// Canonical command-line string.
    pub fn as_str(self) -> &'static str {
        match self {
            DynamicsKind::SsMlp => "ss-mlp",
            DynamicsKind::SsDiff => "ss-diff",
            DynamicsKind::MsDiff => "ms-diff",
            DynamicsKind::Art => "art",
        }
    }

    /// Parses the canonical string.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ss-mlp" => Some(DynamicsKind::SsMlp),
            "ss-diff" => Some(DynamicsKind::SsDiff),
            "ms-diff" => Some(DynamicsKind::MsDiff),
            "art" => Some(DynamicsKind::Art),
            _ => None,
        }
    }

    /// Diffusion step count (None for deterministic kinds).
    pub fn diffusion_steps(self) -> Option<usize> {
        match self {
            DynamicsKind::SsDiff => Some(3),
            DynamicsKind::MsDiff => Some(10),
            _ => None,
        }
    }
}

/// A trained dynamics model.
#[derive(Debug, Clone)]
pub struct DynamicsModel {
    /// Architecture kind.
    pub kind: DynamicsKind,
    /// Network shape.
    pub spec: NetworkSpec,
    /// Evaluation parameters (EMA unless the caller swapped in the last
    /// checkpoint).
    pub params: ParamSet,
    /// State normalizer fitted on the training data.
    pub normalizer: Normalizer,
    /// Forecast horizon F the model was trained for.
    pub horizon: usize,
    /// State dimension.
    pub state_dim: usize,
    /// Action dimension.
    pub action_dim: usize,
    /// Denoising schedule for diffusion kinds.
    pub schedule: Option<DiffusionSchedule>,
}

fn network_spec(
    kind: DynamicsKind,
    preset: Preset,
    state_dim: usize,
    action_dim: usize,
    horizon: usize,
) -> NetworkSpec {
    let (token_dim, heads, qkv_dim, hidden_dim) = preset.transformer_dims();
    match kind {
        DynamicsKind::SsMlp => NetworkSpec {
            layers: 2,
            token_dim: 1,
            heads: 1,
            qkv_dim: 1,
            hidden_dim: 512,
            fourier_bases: 1,
            io: IoSpec::Mlp { input_dim: state_dim + action_dim, output_dim: state_dim },
        },
        DynamicsKind::SsDiff => NetworkSpec {
            layers: preset.ss_layers(),
            token_dim,
            heads,
            qkv_dim,
            hidden_dim,
            fourier_bases: preset.fourier_bases(),
            io: IoSpec::Denoiser {
                state_dim,
                action_dim,
                cond_state_tokens: 1,
                cond_action_tokens: 1,
                modeled_tokens: 1,
                modeled_role: TokenRole::State,
            },
        },
        DynamicsKind::MsDiff => NetworkSpec {
            layers: preset.ms_layers(),
            token_dim,
            heads,
            qkv_dim,
            hidden_dim,
            fourier_bases: preset.fourier_bases(),
            io: IoSpec::Denoiser {
                state_dim,
                action_dim,
                cond_state_tokens: 1,
                cond_action_tokens: horizon,
                modeled_tokens: horizon,
                modeled_role: TokenRole::State,
            },
        },
        DynamicsKind::Art => {
            let (layers, window) = preset.art_layers_window();
            NetworkSpec {
                layers,
                token_dim,
                heads,
                qkv_dim,
                hidden_dim,
                fourier_bases: preset.fourier_bases(),
                io: IoSpec::Causal { state_dim, action_dim, attn_window: window },
            }
        }
    }
}

/// Normalized states live on the ECDF grid, inside [−1, 1].
fn state_bounds(state_dim: usize) -> SampleBounds {
    SampleBounds { per_col: vec![(-1.0, 1.0); state_dim] }
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

impl DynamicsModel {
    /// Trains a dynamics model of the given kind on the dataset.
    pub fn train(
        dataset: &Dataset,
        kind: DynamicsKind,
        preset: Preset,
        horizon: usize,
        config: &TrainConfig,
    ) -> Result<DynamicsModel, ModelError> {
        let trained = Self::train_net(dataset, kind, preset, horizon, config, None, None)?;
        Self::assemble(dataset, kind, preset, horizon, trained.ema)
    }

    /// Fine-tunes an existing model on a new dataset: same architecture,
    /// fresh optimizer, normalizer kept from the original fit (training and
    /// inference must see the same scaling).
    pub fn finetune(
        &self,
        dataset: &Dataset,
        preset: Preset,
        config: &TrainConfig,
    ) -> Result<DynamicsModel, ModelError> {
        if dataset.state_dim != self.state_dim || dataset.action_dim != self.action_dim {
            return Err(ModelError::Invalid("finetune dataset dims differ from the model".into()));
        }
        let trained = Self::train_net(
            dataset,
            self.kind,
            preset,
            self.horizon,
            config,
            Some(&self.params),
            Some(&self.normalizer),
        )?;
        let mut out = self.clone();
        out.params = trained.ema;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn train_net(
        dataset: &Dataset,
        kind: DynamicsKind,
        preset: Preset,
        horizon: usize,
        config: &TrainConfig,
        init: Option<&ParamSet>,
        normalizer: Option<&Normalizer>,
    ) -> Result<TrainedNet, ModelError> {
        let normalizer = match normalizer {
            Some(n) => n.clone(),
            None => Normalizer::fit(dataset)?,
        };
        let spec = network_spec(kind, preset, dataset.state_dim, dataset.action_dim, horizon);
        let state_dim = dataset.state_dim;
        let action_dim = dataset.action_dim;
        match kind {
            DynamicsKind::SsMlp => {
                let windows = make_windows(dataset, 1, 1, 0.99, 100.0)?;
                let inputs: Vec<Vec<f64>> = windows
                    .iter()
                    .map(|w| {
                        let mut x = normalizer.normalize(&w.state);
                        x.extend_from_slice(&w.actions[0]);
                        x
                    })
                    .collect();
                let targets: Vec<Vec<f64>> =
                    windows.iter().map(|w| normalizer.normalize(&w.next_states[0])).collect();
                let spec_clone = spec.clone();
                let batch = config.batch;
                let start = match init {
                    Some(p) => p.clone(),
                    None => spec.init_params(config.seed)?,
                };
                super::train::train_batched_init(config, start, move |tape, ids, params, rng| {
                    let mut xs = Vec::with_capacity(batch * (state_dim + action_dim));
                    let mut ys = Vec::with_capacity(batch * state_dim);
                    for _ in 0..batch {
                        let i = rng.gen_range(0..inputs.len());
                        xs.extend_from_slice(&inputs[i]);
                        ys.extend_from_slice(&targets[i]);
                    }
                    let x = tape.leaf(Tensor::matrix(batch, state_dim + action_dim, xs)?);
                    let pred = crate::tensor::tape_mlp(tape, &spec_clone, ids, params, x)?;
                    let target = tape.leaf(Tensor::matrix(batch, state_dim, ys)?);
                    let diff = tape.sub(pred, target)?;
                    let sq = tape.square(diff);
                    Ok(tape.mean_all(sq))
                })
            }
            DynamicsKind::SsDiff | DynamicsKind::MsDiff => {
                let f = if kind == DynamicsKind::SsDiff { 1 } else { horizon };
                let windows = make_windows(dataset, f, 1, 0.99, 100.0)?;
                let schedule = DiffusionSchedule::cosine(kind.diffusion_steps().unwrap());
                let spec_clone = spec.clone();
                train_accumulated_from(&spec, config, init, move |tape, ids, params, rng| {
                    let w = &windows[rng.gen_range(0..windows.len())];
                    let normed: Vec<Vec<f64>> =
                        w.next_states.iter().map(|s| normalizer.normalize(s)).collect();
                    let x0 = Tensor::matrix(f, state_dim, flatten(&normed))?;
                    let cond_s =
                        Tensor::matrix(1, state_dim, normalizer.normalize(&w.state))?;
                    let cond_a = Tensor::matrix(f, action_dim, flatten(&w.actions))?;
                    dsm_loss_one(tape, &spec_clone, ids, params, &schedule, &x0, cond_s, cond_a, rng)
                })
            }
            DynamicsKind::Art => {
                let IoSpec::Causal { attn_window, .. } = spec.io else { unreachable!() };
                let pairs = (attn_window / 2).min(horizon.max(1));
                let windows = make_windows(dataset, pairs, 1, 0.99, 100.0)?;
                let spec_clone = spec.clone();
                train_accumulated_from(&spec, config, init, move |tape, ids, params, rng| {
                    let w = &windows[rng.gen_range(0..windows.len())];
                    let mut in_states = vec![normalizer.normalize(&w.state)];
                    for s in &w.next_states[..pairs - 1] {
                        in_states.push(normalizer.normalize(s));
                    }
                    let target_states: Vec<Vec<f64>> =
                        w.next_states.iter().map(|s| normalizer.normalize(s)).collect();
                    let s = tape.leaf(Tensor::matrix(pairs, state_dim, flatten(&in_states))?);
                    let a = tape.leaf(Tensor::matrix(pairs, action_dim, flatten(&w.actions))?);
                    let mask = causal_mask(2 * pairs, attn_window);
                    let (pa, ps) = tape_causal(tape, &spec_clone, ids, params, s, a, &mask)?;
                    let ts = tape.leaf(Tensor::matrix(pairs, state_dim, flatten(&target_states))?);
                    let ta = tape.leaf(Tensor::matrix(pairs, action_dim, flatten(&w.actions))?);
                    let ds = tape.sub(ps, ts)?;
                    let da = tape.sub(pa, ta)?;
                    let ss = tape.square(ds);
                    let sa = tape.square(da);
                    let ls = tape.mean_all(ss);
                    let la = tape.mean_all(sa);
                    tape.add(ls, la).map_err(ModelError::from)
                })
            }
        }
    }

    fn assemble(
        dataset: &Dataset,
        kind: DynamicsKind,
        preset: Preset,
        horizon: usize,
        params: ParamSet,
    ) -> Result<DynamicsModel, ModelError> {
        Ok(DynamicsModel {
            kind,
            spec: network_spec(kind, preset, dataset.state_dim, dataset.action_dim, horizon),
            params,
            normalizer: Normalizer::fit(dataset)?,
            horizon,
            state_dim: dataset.state_dim,
            action_dim: dataset.action_dim,
            schedule: kind.diffusion_steps().map(DiffusionSchedule::cosine),
        })
    }

    /// Builds a model from parts (checkpoint loading, tests).
    pub fn from_parts(
        kind: DynamicsKind,
        spec: NetworkSpec,
        params: ParamSet,
        normalizer: Normalizer,
        horizon: usize,
        state_dim: usize,
        action_dim: usize,
    ) -> Self {
        DynamicsModel {
            kind,
            spec,
            params,
            normalizer,
            horizon,
            state_dim,
            action_dim,
            schedule: kind.diffusion_steps().map(DiffusionSchedule::cosine),
        }
    }

    /// Predicts one step: raw state in, raw state out. Single-step kinds
    /// only; `ms-diff` and `art` predict whole sequences via [`Self::rollout`].
    pub fn step_one(
        &self,
        state: &[f64],
        action: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, ModelError> {
        let normed = self.normalizer.normalize(state);
        match self.kind {
            DynamicsKind::SsMlp => {
                let mut x = normed;
                x.extend_from_slice(action);
                let x = Tensor::matrix(1, self.state_dim + self.action_dim, x)?;
                let out = mlp_forward(&self.spec, &self.params, &x)?;
                if out.has_non_finite() {
                    return Err(ModelError::NonFinite("ss-mlp dynamics".into()));
                }
                Ok(self.normalizer.unnormalize(out.values()))
            }
            DynamicsKind::SsDiff => {
                let cond_s = Tensor::matrix(1, self.state_dim, normed)?;
                let cond_a = Tensor::matrix(1, self.action_dim, action.to_vec())?;
                let out = sample_block(
                    &self.spec,
                    &self.params,
                    self.schedule.as_ref().unwrap(),
                    1,
                    self.state_dim,
                    &cond_s,
                    &cond_a,
                    &state_bounds(self.state_dim),
                    rng,
                )?;
                Ok(self.normalizer.unnormalize(out.values()))
            }
            _ => Err(ModelError::Invalid(format!(
                "{} dynamics predict sequences; call rollout",
                self.kind.as_str()
            ))),
        }
    }

    /// Predicts the states visited under the action sequence: raw state in,
    /// one raw state per action out.
    pub fn rollout(
        &self,
        state: &[f64],
        actions: &[Vec<f64>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        if actions.is_empty() {
            return Err(ModelError::Invalid("rollout needs at least one action".into()));
        }
        match self.kind {
            DynamicsKind::SsMlp | DynamicsKind::SsDiff => {
                let mut s = state.to_vec();
                let mut out = Vec::with_capacity(actions.len());
                for a in actions {
                    s = self.step_one(&s, a, rng)?;
                    out.push(s.clone());
                }
                Ok(out)
            }
            DynamicsKind::MsDiff => {
                if actions.len() != self.horizon {
                    return Err(ModelError::Invalid(format!(
                        "ms-diff dynamics trained for horizon {}, got {} actions",
                        self.horizon,
                        actions.len()
                    )));
                }
                let cond_s =
                    Tensor::matrix(1, self.state_dim, self.normalizer.normalize(state))?;
                let cond_a = Tensor::matrix(self.horizon, self.action_dim, flatten(actions))?;
                let block = sample_block(
                    &self.spec,
                    &self.params,
                    self.schedule.as_ref().unwrap(),
                    self.horizon,
                    self.state_dim,
                    &cond_s,
                    &cond_a,
                    &state_bounds(self.state_dim),
                    rng,
                )?;
                Ok(block.row_vecs().iter().map(|r| self.normalizer.unnormalize(r)).collect())
            }
            DynamicsKind::Art => {
                let IoSpec::Causal { attn_window, .. } = self.spec.io else { unreachable!() };
                let max_pairs = (attn_window / 2).max(1);
                let mut ctx_states = vec![self.normalizer.normalize(state)];
                let mut ctx_actions: Vec<Vec<f64>> = Vec::new();
                let mut out = Vec::with_capacity(actions.len());
                for a in actions {
                    ctx_actions.push(a.clone());
                    let start = ctx_states.len().saturating_sub(max_pairs);
                    let span = ctx_states.len() - start;
                    let s = Tensor::matrix(span, self.state_dim, flatten(&ctx_states[start..]))?;
                    let act =
                        Tensor::matrix(span, self.action_dim, flatten(&ctx_actions[start..]))?;
                    let pred = causal_forward(&self.spec, &self.params, &s, &act)?;
                    if pred.pred_states.has_non_finite() {
                        return Err(ModelError::NonFinite("art dynamics".into()));
                    }
                    let next = pred.pred_states.row_vecs().pop().unwrap();
                    out.push(self.normalizer.unnormalize(&next));
                    ctx_states.push(next);
                }
                Ok(out)
            }
        }
    }
}

/// `train_accumulated`, optionally starting from existing parameters
/// (fine-tuning) instead of a fresh init.
fn train_accumulated_from<L>(
    spec: &NetworkSpec,
    config: &TrainConfig,
    init: Option<&ParamSet>,
    loss: L,
) -> Result<TrainedNet, ModelError>
where
    L: for<'a> FnMut(
        &mut crate::tensor::Tape<'a>,
        &[crate::tensor::NodeId],
        &'a ParamSet,
        &mut ChaCha8Rng,
    ) -> Result<crate::tensor::NodeId, ModelError>,
{
    match init {
        None => train_accumulated(spec, config, loss),
        Some(params) => super::train::train_accumulated_init(config, params.clone(), loss),
    }
}
