//! MBOP component models: ensembles of single-step MLPs for the behaviour
//! prior f_prop(s, a_prev), dynamics f_states(s, a), reward f_reward(s, a),
//! and value f_value(s, a).
//!
//! The planner consumes these through [`MbopModel`], so tests can substitute
//! closed-form stubs.

use super::train::{train_batched, TrainConfig, TrainedNet};
use super::{ModelError, TargetScale};
use crate::data::{make_windows, Dataset, Normalizer, Window};
use crate::tensor::{mlp_forward, IoSpec, NetworkSpec, ParamSet, Tensor};
use rand::Rng;

/// Model access the MBOP-TrajOpt planner needs. `l` indexes the ensemble.
pub trait MbopModel {
    /// Ensemble size K.
    fn ensemble_size(&self) -> usize;
    /// Action dimension.
    fn action_dim(&self) -> usize;
    /// Behaviour prior: f_prop^l(s_t, a_{t−1}) → a_t.
    fn prop(&self, l: usize, state: &[f64], a_prev: &[f64]) -> Result<Vec<f64>, ModelError>;
    /// Dynamics: f_states^l(s_t, a_t) → s_{t+1}.
    fn step(&self, l: usize, state: &[f64], action: &[f64]) -> Result<Vec<f64>, ModelError>;
    /// Ensemble-mean one-step reward.
    fn mean_reward(&self, state: &[f64], action: &[f64]) -> Result<f64, ModelError>;
    /// Ensemble-mean terminal value (return units).
    fn mean_value(&self, state: &[f64], action: &[f64]) -> Result<f64, ModelError>;
}

/// Training settings for the component set.
#[derive(Debug, Clone)]
pub struct MbopTrainConfig {
    /// Ensemble size K (default 1).
    pub k: usize,
    /// Per-net optimization settings.
    pub train: TrainConfig,
    /// Discount for value targets.
    pub gamma: f64,
    /// Early-termination penalty for value targets.
    pub penalty: f64,
}

impl MbopTrainConfig {
    /// Default: single member per family, standard recipe.
    pub fn standard(steps: usize, batch: usize, seed: u64) -> Self {
        MbopTrainConfig { k: 1, train: TrainConfig::standard(steps, batch, seed), gamma: 0.99, penalty: 100.0 }
    }
}

/// Trained MBOP component set.
#[derive(Debug, Clone)]
pub struct MbopComponents {
    /// Ensemble size K.
    pub k: usize,
    /// State dimension.
    pub state_dim: usize,
    /// Action dimension.
    pub action_dim: usize,
    /// Shared state normalizer.
    pub normalizer: Normalizer,
    /// Standardization of value targets.
    pub value_scale: TargetScale,
    pub(crate) prop_spec: NetworkSpec,
    pub(crate) prop: Vec<ParamSet>,
    pub(crate) dyn_spec: NetworkSpec,
    pub(crate) dynamics: Vec<ParamSet>,
    pub(crate) reward_spec: NetworkSpec,
    pub(crate) reward: Vec<ParamSet>,
    pub(crate) value_spec: NetworkSpec,
    pub(crate) value: Vec<ParamSet>,
}

pub(crate) fn mlp_spec(input_dim: usize, output_dim: usize) -> NetworkSpec {
    NetworkSpec {
        layers: 2,
        token_dim: 1,
        heads: 1,
        qkv_dim: 1,
        hidden_dim: 512,
        fourier_bases: 1,
        io: IoSpec::Mlp { input_dim, output_dim },
    }
}

/// Trains one regression net on (input, target) rows.
fn fit_pairs(
    spec: &NetworkSpec,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<TrainedNet, ModelError> {
    let IoSpec::Mlp { input_dim, output_dim } = spec.io else { unreachable!() };
    let spec_clone = spec.clone();
    let batch = config.batch;
    let inputs = inputs.to_vec();
    let targets = targets.to_vec();
    train_batched(spec, config, move |tape, ids, params, rng| {
        let mut xs = Vec::with_capacity(batch * input_dim);
        let mut ys = Vec::with_capacity(batch * output_dim);
        for _ in 0..batch {
            let i = rng.gen_range(0..inputs.len());
            xs.extend_from_slice(&inputs[i]);
            ys.extend_from_slice(&targets[i]);
        }
        let x = tape.leaf(Tensor::matrix(batch, input_dim, xs)?);
        let pred = crate::tensor::tape_mlp(tape, &spec_clone, ids, params, x)?;
        let target = tape.leaf(Tensor::matrix(batch, output_dim, ys)?);
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        Ok(tape.mean_all(sq))
    })
}

impl MbopComponents {
    /// Trains all four families, K members each, on the dataset.
    pub fn train(dataset: &Dataset, config: &MbopTrainConfig) -> Result<MbopComponents, ModelError> {
        if config.k == 0 {
            return Err(ModelError::Invalid("mbop ensemble size must be at least 1".into()));
        }
        let normalizer = Normalizer::fit(dataset)?;
        let d = dataset.state_dim;
        let m = dataset.action_dim;
        // H=2 so each window carries the previous action for the prior.
        let windows = make_windows(dataset, 1, 2, config.gamma, config.penalty)?;
        let value_scale =
            TargetScale::fit(&windows.iter().map(|w| w.return_to_go).collect::<Vec<f64>>());

        let norm_sa = |w: &Window| {
            let mut x = normalizer.normalize(&w.state);
            x.extend_from_slice(&w.actions[0]);
            x
        };
        let prop_in: Vec<Vec<f64>> = windows
            .iter()
            .map(|w| {
                let mut x = normalizer.normalize(&w.state);
                x.extend_from_slice(&w.history_actions[0]);
                x
            })
            .collect();
        let prop_tgt: Vec<Vec<f64>> = windows.iter().map(|w| w.actions[0].clone()).collect();
        let dyn_in: Vec<Vec<f64>> = windows.iter().map(norm_sa).collect();
        let dyn_tgt: Vec<Vec<f64>> =
            windows.iter().map(|w| normalizer.normalize(&w.next_states[0])).collect();
        let reward_tgt: Vec<Vec<f64>> = windows.iter().map(|w| vec![w.reward]).collect();
        let value_tgt: Vec<Vec<f64>> =
            windows.iter().map(|w| vec![value_scale.apply(w.return_to_go)]).collect();

        let prop_spec = mlp_spec(d + m, m);
        let dyn_spec = mlp_spec(d + m, d);
        let reward_spec = mlp_spec(d + m, 1);
        let value_spec = mlp_spec(d + m, 1);
        let mut prop = Vec::with_capacity(config.k);
        let mut dynamics = Vec::with_capacity(config.k);
        let mut reward = Vec::with_capacity(config.k);
        let mut value = Vec::with_capacity(config.k);
        for i in 0..config.k {
            let member = |family: u64| {
                let mut c = config.train.clone();
                c.seed = config.train.seed.wrapping_add(1000 * family + i as u64);
                c
            };
            prop.push(fit_pairs(&prop_spec, &prop_in, &prop_tgt, &member(1))?.ema);
            dynamics.push(fit_pairs(&dyn_spec, &dyn_in, &dyn_tgt, &member(2))?.ema);
            reward.push(fit_pairs(&reward_spec, &dyn_in, &reward_tgt, &member(3))?.ema);
            value.push(fit_pairs(&value_spec, &dyn_in, &value_tgt, &member(4))?.ema);
        }
        Ok(MbopComponents {
            k: config.k,
            state_dim: d,
            action_dim: m,
            normalizer,
            value_scale,
            prop_spec,
            prop,
            dyn_spec,
            dynamics,
            reward_spec,
            reward,
            value_spec,
            value,
        })
    }

    fn eval(
        &self,
        spec: &NetworkSpec,
        params: &ParamSet,
        state: &[f64],
        tail: &[f64],
        label: &str,
    ) -> Result<Vec<f64>, ModelError> {
        let mut x = self.normalizer.normalize(state);
        x.extend_from_slice(tail);
        let x = Tensor::matrix(1, x.len(), x)?;
        let out = mlp_forward(spec, params, &x)?;
        if out.has_non_finite() {
            return Err(ModelError::NonFinite(label.into()));
        }
        Ok(out.values().to_vec())
    }
}

impl MbopModel for MbopComponents {
    fn ensemble_size(&self) -> usize {
        self.k
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn prop(&self, l: usize, state: &[f64], a_prev: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.eval(&self.prop_spec, &self.prop[l % self.k], state, a_prev, "mbop prior")
    }

    fn step(&self, l: usize, state: &[f64], action: &[f64]) -> Result<Vec<f64>, ModelError> {
        let normed =
            self.eval(&self.dyn_spec, &self.dynamics[l % self.k], state, action, "mbop dynamics")?;
        Ok(self.normalizer.unnormalize(&normed))
    }

    fn mean_reward(&self, state: &[f64], action: &[f64]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for p in &self.reward {
            total += self.eval(&self.reward_spec, p, state, action, "mbop reward")?[0];
        }
        Ok(total / self.k as f64)
    }

    fn mean_value(&self, state: &[f64], action: &[f64]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for p in &self.value {
            let z = self.eval(&self.value_spec, p, state, action, "mbop value")?[0];
            total += self.value_scale.invert(z);
        }
        Ok(total / self.k as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, PolicyKind};
    use crate::envs::EnvSpec;

    fn small_config(steps: usize, k: usize, seed: u64) -> MbopTrainConfig {
        let mut c = MbopTrainConfig::standard(steps, 32, seed);
        c.k = k;
        c.train.schedule = crate::tensor::TrainSchedule {
            warmup_steps: 30,
            peak_lr: 2e-3,
            final_lr: 2e-4,
            total_steps: steps,
        };
        c
    }

    #[test]
    fn trains_all_families_with_consistent_shapes() {
        let env = EnvSpec::pointmass2d();
        let ds = generate_dataset(&env, PolicyKind::ScriptedNoisy, 4, 3);
        let models = MbopComponents::train(&ds, &small_config(40, 2, 5)).unwrap();
        assert_eq!(models.ensemble_size(), 2);
        let s = vec![0.1, 0.2, 0.0, 0.0];
        let a = vec![0.3, -0.3];
        for l in 0..2 {
            assert_eq!(models.prop(l, &s, &a).unwrap().len(), 2);
            assert_eq!(models.step(l, &s, &a).unwrap().len(), 4);
        }
        assert!(models.mean_reward(&s, &a).unwrap().is_finite());
        assert!(models.mean_value(&s, &a).unwrap().is_finite());
    }

    #[test]
    fn ensemble_members_differ() {
        let env = EnvSpec::pointmass2d();
        let ds = generate_dataset(&env, PolicyKind::ScriptedNoisy, 4, 3);
        let models = MbopComponents::train(&ds, &small_config(40, 2, 5)).unwrap();
        let s = vec![0.1, 0.2, 0.0, 0.0];
        let a = vec![0.3, -0.3];
        assert_ne!(models.prop(0, &s, &a).unwrap(), models.prop(1, &s, &a).unwrap());
        // Ensemble index wraps modulo K.
        assert_eq!(models.prop(0, &s, &a).unwrap(), models.prop(2, &s, &a).unwrap());
    }

    #[test]
    fn reward_model_tracks_pointmass_reward_scale() {
        let env = EnvSpec::pointmass2d();
        let ds = generate_dataset(&env, PolicyKind::ScriptedExpert, 8, 9);
        let mut config = small_config(500, 1, 6);
        config.train.batch = 64;
        let models = MbopComponents::train(&ds, &config).unwrap();
        // Expert data sits near the goal late in episodes: reward ≈ 1 there.
        let late = &ds.episodes[0].states[150];
        let a = vec![0.0, 0.0];
        let r = models.mean_reward(late, &a).unwrap();
        let true_r = (-((late[0] - 1.0).powi(2) + (late[1] - 1.0).powi(2)) / 0.5).exp();
        assert!(
            (r - true_r).abs() < 0.2,
            "reward model {r} vs true reward {true_r} at a late expert state"
        );
    }
}
