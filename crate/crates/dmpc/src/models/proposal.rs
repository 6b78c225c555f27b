//! Action proposals: behaviour-cloning distributions over future actions.
//!
//! Three kinds, one per column of the model table: `ss-mlp` regresses a_t
//! from s_t, `ss-diff` models p(a_t|s_t) with a 5-step denoiser, `ms-diff`
//! models the joint p(a_{t:t+F−1}|s_t) with a 32-step denoiser. Single-step
//! kinds compose autoregressively against a companion dynamics model when a
//! full F-step sequence is requested.

use super::denoise::{dsm_loss_one, sample_block};
use super::train::{train_accumulated, train_batched, TrainConfig};
use super::{DynamicsModel, ModelError, Preset};
use crate::data::{make_windows, Dataset, Normalizer, Window};
use crate::diffusion::{DiffusionSchedule, SampleBounds};
use crate::envs::EnvSpec;
use crate::exec::par_map;
use crate::tensor::{mlp_forward, IoSpec, NetworkSpec, ParamSet, Tensor, TokenRole};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which proposal architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKind {
    /// Deterministic MLP regression a_t = f(s_t).
    SsMlp,
    /// Single-step diffusion p(a_t|s_t), 5 denoising steps.
    SsDiff,
    /// Multi-step diffusion p(a_{t:t+F−1}|s_t), 32 denoising steps.
    MsDiff,
}

impl ProposalKind {
    /// Canonical command-line string.
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalKind::SsMlp => "ss-mlp",
            ProposalKind::SsDiff => "ss-diff",
            ProposalKind::MsDiff => "ms-diff",
        }
    }

    /// Parses the canonical string.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ss-mlp" => Some(ProposalKind::SsMlp),
            "ss-diff" => Some(ProposalKind::SsDiff),
            "ms-diff" => Some(ProposalKind::MsDiff),
            _ => None,
        }
    }

    /// Diffusion step count (None for the MLP).
    pub fn diffusion_steps(self) -> Option<usize> {
        match self {
            ProposalKind::SsMlp => None,
            ProposalKind::SsDiff => Some(5),
            ProposalKind::MsDiff => Some(32),
        }
    }
}

/// Candidate action sequences, plus predicted states when the sampling
/// process already rolled dynamics (single-step composition).
#[derive(Debug, Clone)]
pub struct Proposals {
    /// N sequences of F actions each.
    pub actions: Vec<Vec<Vec<f64>>>,
    /// For composed proposals: the states visited while sampling, N × F × d.
    pub states: Option<Vec<Vec<Vec<f64>>>>,
}

/// A trained action proposal.
#[derive(Debug, Clone)]
pub struct ActionProposal {
    /// Architecture kind.
    pub kind: ProposalKind,
    /// Network shape.
    pub spec: NetworkSpec,
    /// Evaluation parameters (EMA).
    pub params: ParamSet,
    /// State normalizer fitted on the training data.
    pub normalizer: Normalizer,
    /// Forecast horizon F.
    pub horizon: usize,
    /// Action bounds from the environment.
    pub action_bounds: Vec<(f64, f64)>,
    /// Denoising schedule for diffusion kinds.
    pub schedule: Option<DiffusionSchedule>,
}

fn network_spec(
    kind: ProposalKind,
    preset: Preset,
    state_dim: usize,
    action_dim: usize,
    horizon: usize,
) -> NetworkSpec {
    let (token_dim, heads, qkv_dim, hidden_dim) = preset.transformer_dims();
    match kind {
        ProposalKind::SsMlp => NetworkSpec {
            layers: 2,
            token_dim: 1,
            heads: 1,
            qkv_dim: 1,
            hidden_dim: 512,
            fourier_bases: 1,
            io: IoSpec::Mlp { input_dim: state_dim, output_dim: action_dim },
        },
        ProposalKind::SsDiff => NetworkSpec {
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
                cond_action_tokens: 0,
                modeled_tokens: 1,
                modeled_role: TokenRole::Action,
            },
        },
        ProposalKind::MsDiff => NetworkSpec {
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
                cond_action_tokens: 0,
                modeled_tokens: horizon,
                modeled_role: TokenRole::Action,
            },
        },
    }
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

impl ActionProposal {
    /// Trains a proposal of the given kind on the dataset.
    pub fn train(
        dataset: &Dataset,
        kind: ProposalKind,
        preset: Preset,
        horizon: usize,
        config: &TrainConfig,
    ) -> Result<ActionProposal, ModelError> {
        if dataset.episodes.is_empty() {
            return Err(ModelError::Invalid("cannot train a proposal on an empty dataset".into()));
        }
        let env = EnvSpec::for_name(dataset.env);
        let normalizer = Normalizer::fit(dataset)?;
        let norm_train = normalizer.clone();
        let window_f = match kind {
            ProposalKind::MsDiff => horizon,
            _ => 1,
        };
        let windows = make_windows(dataset, window_f, 1, 0.99, 100.0)?;
        let spec = network_spec(kind, preset, dataset.state_dim, dataset.action_dim, horizon);
        let schedule = kind.diffusion_steps().map(DiffusionSchedule::cosine);

        let trained = match kind {
            ProposalKind::SsMlp => {
                let norm_states: Vec<Vec<f64>> =
                    windows.iter().map(|w| norm_train.normalize(&w.state)).collect();
                let spec_clone = spec.clone();
                train_batched(&spec, config, move |tape, ids, params, rng| {
                    let b = config.batch;
                    let mut xs = Vec::with_capacity(b * dataset.state_dim);
                    let mut ys = Vec::with_capacity(b * dataset.action_dim);
                    for _ in 0..b {
                        let i = rng.gen_range(0..windows.len());
                        xs.extend_from_slice(&norm_states[i]);
                        ys.extend_from_slice(&windows[i].actions[0]);
                    }
                    let x = tape.leaf(Tensor::matrix(b, dataset.state_dim, xs)?);
                    let pred = crate::tensor::tape_mlp(tape, &spec_clone, ids, params, x)?;
                    let target = tape.leaf(Tensor::matrix(b, dataset.action_dim, ys)?);
                    let diff = tape.sub(pred, target)?;
                    let sq = tape.square(diff);
                    Ok(tape.mean_all(sq))
                })?
            }
            ProposalKind::SsDiff | ProposalKind::MsDiff => {
                let schedule = schedule.clone().unwrap();
                let spec_clone = spec.clone();
                let tokens = match kind {
                    ProposalKind::SsDiff => 1,
                    _ => horizon,
                };
                train_accumulated(&spec, config, move |tape, ids, params, rng| {
                    let w = &windows[rng.gen_range(0..windows.len())];
                    let x0 =
                        Tensor::matrix(tokens, dataset.action_dim, flatten(&w.actions[..tokens]))?;
                    let cond =
                        Tensor::matrix(1, dataset.state_dim, norm_train.normalize(&w.state))?;
                    let empty = Tensor::zeros(&[0, dataset.action_dim]);
                    dsm_loss_one(
                        tape, &spec_clone, ids, params, &schedule, &x0, cond, empty, rng,
                    )
                })?
            }
        };
        Ok(ActionProposal {
            kind,
            spec,
            params: trained.ema,
            normalizer,
            horizon,
            action_bounds: env.action_bounds,
            schedule,
        })
    }

    /// Builds a proposal from parts (checkpoint loading, tests, distilled
    /// policies).
    pub fn from_parts(
        kind: ProposalKind,
        spec: NetworkSpec,
        params: ParamSet,
        normalizer: Normalizer,
        horizon: usize,
        action_bounds: Vec<(f64, f64)>,
    ) -> Self {
        let schedule = kind.diffusion_steps().map(DiffusionSchedule::cosine);
        ActionProposal { kind, spec, params, normalizer, horizon, action_bounds, schedule }
    }

    fn action_sample_bounds(&self) -> SampleBounds {
        SampleBounds { per_col: self.action_bounds.clone() }
    }

    /// Deterministic single action for one state (ss-mlp only path used by
    /// distilled policies; diffusion kinds draw a one-step sample).
    pub fn propose_one(
        &self,
        state: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, ModelError> {
        let normed = self.normalizer.normalize(state);
        match self.kind {
            ProposalKind::SsMlp => {
                let x = Tensor::matrix(1, normed.len(), normed)?;
                let out = mlp_forward(&self.spec, &self.params, &x)?;
                if out.has_non_finite() {
                    return Err(ModelError::NonFinite("ss-mlp proposal".into()));
                }
                Ok(clip(out.values(), &self.action_bounds))
            }
            ProposalKind::SsDiff => {
                let cond = Tensor::matrix(1, normed.len(), normed)?;
                let empty = Tensor::zeros(&[0, self.action_bounds.len()]);
                let out = sample_block(
                    &self.spec,
                    &self.params,
                    self.schedule.as_ref().unwrap(),
                    1,
                    self.action_bounds.len(),
                    &cond,
                    &empty,
                    &self.action_sample_bounds(),
                    rng,
                )?;
                Ok(out.values().to_vec())
            }
            ProposalKind::MsDiff => Err(ModelError::Invalid(
                "ms-diff proposes joint sequences; call propose".into(),
            )),
        }
    }

    /// Samples `n` F-step action sequences. Single-step kinds require a
    /// companion dynamics model and compose autoregressively; the states
    /// visited during composition are returned alongside.
    pub fn propose(
        &self,
        state: &[f64],
        _history: &[(Vec<f64>, Vec<f64>)],
        n: usize,
        dynamics: Option<&DynamicsModel>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Proposals, ModelError> {
        match self.kind {
            ProposalKind::MsDiff => {
                let normed = self.normalizer.normalize(state);
                let cond = Tensor::matrix(1, normed.len(), normed)?;
                let m = self.action_bounds.len();
                let bounds = self.action_sample_bounds();
                let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
                let results = par_map(n, |i| {
                    let mut crng = ChaCha8Rng::seed_from_u64(seeds[i]);
                    let empty = Tensor::zeros(&[0, m]);
                    sample_block(
                        &self.spec,
                        &self.params,
                        self.schedule.as_ref().unwrap(),
                        self.horizon,
                        m,
                        &cond,
                        &empty,
                        &bounds,
                        &mut crng,
                    )
                    .map(|t| t.row_vecs())
                });
                let mut actions = Vec::with_capacity(n);
                for r in results {
                    actions.push(r?);
                }
                Ok(Proposals { actions, states: None })
            }
            ProposalKind::SsMlp | ProposalKind::SsDiff => {
                let dynamics = dynamics.ok_or_else(|| {
                    ModelError::Invalid(format!(
                        "{} proposals need a companion dynamics model for sequence sampling",
                        self.kind.as_str()
                    ))
                })?;
                let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
                let results = par_map(n, |i| {
                    let mut crng = ChaCha8Rng::seed_from_u64(seeds[i]);
                    let mut s = state.to_vec();
                    let mut actions = Vec::with_capacity(self.horizon);
                    let mut states = Vec::with_capacity(self.horizon);
                    for _ in 0..self.horizon {
                        let a = self.propose_one(&s, &mut crng)?;
                        s = dynamics.step_one(&s, &a, &mut crng)?;
                        actions.push(a);
                        states.push(s.clone());
                    }
                    Ok::<_, ModelError>((actions, states))
                });
                let mut actions = Vec::with_capacity(n);
                let mut states = Vec::with_capacity(n);
                for r in results {
                    let (a, s) = r?;
                    actions.push(a);
                    states.push(s);
                }
                Ok(Proposals { actions, states: Some(states) })
            }
        }
    }

    /// Held-out mean squared error of the ss-mlp regression (per scalar).
    pub fn mlp_mse(&self, windows: &[Window]) -> Result<f64, ModelError> {
        if self.kind != ProposalKind::SsMlp {
            return Err(ModelError::Invalid("mse is defined for the ss-mlp proposal".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for w in windows {
            let normed = self.normalizer.normalize(&w.state);
            let x = Tensor::matrix(1, normed.len(), normed)?;
            let out = mlp_forward(&self.spec, &self.params, &x)?;
            for (p, t) in out.values().iter().zip(&w.actions[0]) {
                total += (p - t) * (p - t);
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }
}

fn clip(values: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    values.iter().zip(bounds).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, PolicyKind};

    fn tiny_config(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 16,
            schedule: crate::tensor::TrainSchedule {
                warmup_steps: 50,
                peak_lr: 2e-3,
                final_lr: 2e-4,
                total_steps: steps,
            },
            clip: 5.0,
            ema_decay: 0.99,
            seed,
        }
    }

    #[test]
    fn diffusion_step_count_defaults() {
        assert_eq!(ProposalKind::MsDiff.diffusion_steps(), Some(32));
        assert_eq!(ProposalKind::SsDiff.diffusion_steps(), Some(5));
        assert_eq!(ProposalKind::SsMlp.diffusion_steps(), None);
    }

    #[test]
    fn ss_mlp_fits_deterministic_policy() {
        // Noise-free scripted data: the regression should be near-exact.
        let spec = EnvSpec::pointmass2d();
        let mut ds = generate_dataset(&spec, PolicyKind::ScriptedExpert, 12, 5);
        for traj in ds.episodes.iter_mut() {
            for (s, a) in traj.states.iter().zip(traj.actions.iter_mut()) {
                *a = spec.clip_action(&crate::data::scripted_action(&spec, s));
            }
        }
        let mut config = tiny_config(900, 7);
        config.batch = 64;
        let prop =
            ActionProposal::train(&ds, ProposalKind::SsMlp, Preset::Desk, 32, &config).unwrap();
        let held_out = {
            let mut h = generate_dataset(&spec, PolicyKind::ScriptedExpert, 2, 99);
            for traj in h.episodes.iter_mut() {
                for (s, a) in traj.states.iter().zip(traj.actions.iter_mut()) {
                    *a = spec.clip_action(&crate::data::scripted_action(&spec, s));
                }
            }
            make_windows(&h, 1, 1, 0.99, 100.0).unwrap()
        };
        let mse = prop.mlp_mse(&held_out).unwrap();
        assert!(mse < 1e-3, "held-out MSE {mse}");
    }

    #[test]
    fn ms_diff_samples_respect_bounds_and_shapes() {
        let spec = EnvSpec::pointmass2d();
        let ds = generate_dataset(&spec, PolicyKind::ScriptedNoisy, 4, 6);
        let prop = ActionProposal::train(
            &ds,
            ProposalKind::MsDiff,
            Preset::Desk,
            8,
            &tiny_config(60, 8),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = prop.propose(&[0.0, 0.0, 0.0, 0.0], &[], 5, None, &mut rng).unwrap();
        assert_eq!(out.actions.len(), 5);
        for seq in &out.actions {
            assert_eq!(seq.len(), 8);
            for a in seq {
                assert_eq!(a.len(), 2);
                for (v, (lo, hi)) in a.iter().zip(&prop.action_bounds) {
                    assert!(*v >= *lo && *v <= *hi, "action {v} outside [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn proposals_are_deterministic_per_seed() {
        let spec = EnvSpec::pointmass2d();
        let ds = generate_dataset(&spec, PolicyKind::ScriptedNoisy, 4, 6);
        let prop = ActionProposal::train(
            &ds,
            ProposalKind::MsDiff,
            Preset::Desk,
            4,
            &tiny_config(40, 8),
        )
        .unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop.propose(&[0.1, 0.1, 0.0, 0.0], &[], 3, None, &mut rng).unwrap().actions
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn ss_kinds_require_dynamics_for_sequences() {
        let spec = EnvSpec::pointmass2d();
        let ds = generate_dataset(&spec, PolicyKind::ScriptedNoisy, 3, 6);
        let prop = ActionProposal::train(
            &ds,
            ProposalKind::SsDiff,
            Preset::Desk,
            4,
            &tiny_config(40, 8),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = prop.propose(&[0.0; 4], &[], 2, None, &mut rng).unwrap_err();
        assert!(err.to_string().contains("companion dynamics"));
    }
}
