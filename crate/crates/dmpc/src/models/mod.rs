//! The model zoo: action proposals (SS-MLP, SS-diffusion, MS-diffusion),
//! dynamics models (SS-MLP, SS-diffusion, MS-diffusion, ART), the objective
//! regressor J, and the MBOP component set.
//!
//! All learned models consume and emit states in ECDF-normalized space and
//! carry their fitted `Normalizer`; public interfaces exchange raw states
//! and actions. Evaluation uses EMA parameters unless a caller explicitly
//! selects the last checkpoint (distillation does).

mod denoise;
mod dynamics;
mod mbop;
mod objective;
mod proposal;
mod store;
mod train;

pub use dynamics::{DynamicsKind, DynamicsModel};
pub use mbop::{MbopComponents, MbopModel, MbopTrainConfig};
pub use objective::ObjectiveModel;
pub use proposal::{ActionProposal, ProposalKind, Proposals};
pub use store::{
    load_dynamics, load_mbop, load_objective, load_proposal, save_dynamics, save_mbop,
    save_objective, save_proposal,
};
pub use train::{
    train_accumulated, train_accumulated_init, train_batched, train_batched_init, TrainConfig,
    TrainedNet,
};

use crate::data::DataError;
use crate::tensor::TensorError;
use thiserror::Error;

/// Errors from model training, inference, and persistence.
#[derive(Debug, Error)]
pub enum ModelError {
    /// Propagated tensor failure.
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// Propagated dataset failure.
    #[error(transparent)]
    Data(#[from] DataError),
    /// Propagated environment failure.
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    /// Invalid configuration or shape.
    #[error("invalid model usage: {0}")]
    Invalid(String),
    /// A rollout or sample produced non-finite values.
    #[error("non-finite prediction in {0}")]
    NonFinite(String),
}

/// Model size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    /// Small dimensions sized for single-core experimentation.
    #[default]
    Desk,
    /// Full-size dimensions.
    Paper,
}

impl Preset {
    /// Canonical command-line string.
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    /// Parses the canonical string.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Preset::Desk),
            "paper" => Some(Preset::Paper),
            _ => None,
        }
    }

    /// Transformer width settings (token dim, heads, qkv dim, hidden dim).
    pub fn transformer_dims(self) -> (usize, usize, usize, usize) {
        match self {
            Preset::Desk => (16, 4, 32, 64),
            Preset::Paper => (256, 8, 1024, 2048),
        }
    }

    /// Layer count for the multi-step diffusion denoisers.
    pub fn ms_layers(self) -> usize {
        match self {
            Preset::Desk => 2,
            Preset::Paper => 5,
        }
    }

    /// Layer count for the single-step diffusion denoisers.
    pub fn ss_layers(self) -> usize {
        2
    }

    /// Layer count for the objective regressor.
    pub fn objective_layers(self) -> usize {
        match self {
            Preset::Desk => 2,
            Preset::Paper => 10,
        }
    }

    /// Layer count and attention window for the ART causal transformer.
    pub fn art_layers_window(self) -> (usize, usize) {
        match self {
            Preset::Desk => (2, 64),
            Preset::Paper => (3, 64),
        }
    }

    /// Fourier position bases.
    pub fn fourier_bases(self) -> usize {
        16
    }

    /// Default optimization step count for one model.
    pub fn train_steps(self) -> usize {
        match self {
            Preset::Desk => 2000,
            Preset::Paper => 200_000,
        }
    }
}

/// Standardization of a scalar regression target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScale {
    /// Training-set mean.
    pub mean: f64,
    /// Training-set standard deviation (floored away from zero).
    pub std: f64,
}

impl TargetScale {
    /// Fits mean/std over raw targets.
    pub fn fit(targets: &[f64]) -> Self {
        let n = targets.len().max(1) as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        TargetScale { mean, std: var.sqrt().max(1e-8) }
    }

    /// Raw target → standardized.
    pub fn apply(&self, t: f64) -> f64 {
        (t - self.mean) / self.std
    }

    /// Standardized prediction → raw scale.
    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}
