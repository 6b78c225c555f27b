//! The objective model J: a transformer regressor from an F-step window of
//! states and actions to the discounted return-to-go.
//!
//! Input is the F+1 states (current plus predicted) and the F actions; a
//! learnable readout token carries the scalar prediction. Targets are
//! standardized during training and mapped back at scoring time.

use super::train::{train_accumulated, TrainConfig};
use super::{ModelError, Preset, TargetScale};
use crate::data::{make_windows, Dataset, Normalizer};
use crate::exec::par_map;
use crate::tensor::{regressor_forward, IoSpec, NetworkSpec, ParamSet, Tensor};
use rand::Rng;

/// A trained return-to-go regressor.
#[derive(Debug, Clone)]
pub struct ObjectiveModel {
    /// Network shape.
    pub spec: NetworkSpec,
    /// Evaluation parameters (EMA).
    pub params: ParamSet,
    /// State normalizer fitted on the training data.
    pub normalizer: Normalizer,
    /// Forecast horizon F.
    pub horizon: usize,
    /// Target standardization fitted on the training returns.
    pub target_scale: TargetScale,
    /// State dimension.
    pub state_dim: usize,
    /// Action dimension.
    pub action_dim: usize,
}

fn network_spec(preset: Preset, state_dim: usize, action_dim: usize, horizon: usize) -> NetworkSpec {
    let (token_dim, heads, qkv_dim, hidden_dim) = preset.transformer_dims();
    NetworkSpec {
        layers: preset.objective_layers(),
        token_dim,
        heads,
        qkv_dim,
        hidden_dim,
        fourier_bases: preset.fourier_bases(),
        io: IoSpec::Regressor {
            state_dim,
            action_dim,
            state_tokens: horizon + 1,
            action_tokens: horizon,
        },
    }
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

impl ObjectiveModel {
    /// Trains the regressor on discounted return-to-go targets.
    pub fn train(
        dataset: &Dataset,
        preset: Preset,
        horizon: usize,
        gamma: f64,
        penalty: f64,
        config: &TrainConfig,
    ) -> Result<ObjectiveModel, ModelError> {
        let normalizer = Normalizer::fit(dataset)?;
        let windows = make_windows(dataset, horizon, 1, gamma, penalty)?;
        let target_scale = TargetScale::fit(
            &windows.iter().map(|w| w.return_to_go).collect::<Vec<f64>>(),
        );
        let spec = network_spec(preset, dataset.state_dim, dataset.action_dim, horizon);
        let state_dim = dataset.state_dim;
        let action_dim = dataset.action_dim;
        let norm_train = normalizer.clone();
        let spec_clone = spec.clone();
        let trained = train_accumulated(&spec, config, move |tape, ids, params, rng| {
            let w = &windows[rng.gen_range(0..windows.len())];
            let mut states = vec![norm_train.normalize(&w.state)];
            for s in &w.next_states {
                states.push(norm_train.normalize(s));
            }
            let s = tape.leaf(Tensor::matrix(horizon + 1, state_dim, flatten(&states))?);
            let a = tape.leaf(Tensor::matrix(horizon, action_dim, flatten(&w.actions))?);
            let pred = crate::tensor::tape_regressor(tape, &spec_clone, ids, params, s, a)?;
            let target = tape.leaf(Tensor::matrix(
                1,
                1,
                vec![target_scale.apply(w.return_to_go)],
            )?);
            let diff = tape.sub(pred, target)?;
            let sq = tape.square(diff);
            Ok(tape.sum_all(sq))
        })?;
        Ok(ObjectiveModel {
            spec,
            params: trained.ema,
            normalizer,
            horizon,
            target_scale,
            state_dim: dataset.state_dim,
            action_dim: dataset.action_dim,
        })
    }

    /// Builds a model from parts (checkpoint loading, tests).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        spec: NetworkSpec,
        params: ParamSet,
        normalizer: Normalizer,
        horizon: usize,
        target_scale: TargetScale,
        state_dim: usize,
        action_dim: usize,
    ) -> Self {
        ObjectiveModel { spec, params, normalizer, horizon, target_scale, state_dim, action_dim }
    }

    /// Scores one candidate: current raw state, the F predicted raw states,
    /// and the F actions. Returns the predicted return-to-go in raw units.
    pub fn score(
        &self,
        state: &[f64],
        states: &[Vec<f64>],
        actions: &[Vec<f64>],
    ) -> Result<f64, ModelError> {
        if states.len() != self.horizon || actions.len() != self.horizon {
            return Err(ModelError::Invalid(format!(
                "objective trained for horizon {}, got {} states / {} actions",
                self.horizon,
                states.len(),
                actions.len()
            )));
        }
        let mut normed = vec![self.normalizer.normalize(state)];
        for s in states {
            normed.push(self.normalizer.normalize(s));
        }
        let s = Tensor::matrix(self.horizon + 1, self.state_dim, flatten(&normed))?;
        let a = Tensor::matrix(self.horizon, self.action_dim, flatten(actions))?;
        let out = regressor_forward(&self.spec, &self.params, &s, &a)?;
        let z = out.item();
        if !z.is_finite() {
            return Err(ModelError::NonFinite("objective score".into()));
        }
        Ok(self.target_scale.invert(z))
    }

    /// Scores N candidates; identical to N individual [`Self::score`] calls,
    /// evaluated in parallel and reduced in candidate order.
    pub fn score_many(
        &self,
        state: &[f64],
        candidates: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)],
    ) -> Vec<Result<f64, ModelError>> {
        par_map(candidates.len(), |i| {
            let (states, actions) = &candidates[i];
            self.score(state, states, actions)
        })
    }
}
