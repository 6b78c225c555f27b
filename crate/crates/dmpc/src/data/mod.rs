//! Offline datasets: scripted generation, ECDF state normalization,
//! training-window extraction, and lossless persistence.

mod gen;
mod io;
mod normalizer;
mod windows;

pub use gen::{generate_dataset, scripted_action, PolicyKind};
pub use io::{load_dataset, save_dataset};
pub use normalizer::Normalizer;
pub use windows::{make_windows, Window};

use crate::envs::EnvName;
use thiserror::Error;

/// Errors from dataset construction, extraction, and persistence.
#[derive(Debug, Error)]
pub enum DataError {
    /// A structural invariant was violated.
    #[error("invalid dataset: {0}")]
    Invalid(String),
    /// No trajectory admits a single training window.
    #[error("no trajectory is long enough for F={f}, H={h} windows")]
    EmptyWindows {
        /// Requested future horizon.
        f: usize,
        /// Requested history length.
        h: usize,
    },
    /// Filesystem failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// A manifest or CSV line failed to parse.
    #[error("{path}:{line}: {message}")]
    Parse {
        /// Offending file.
        path: String,
        /// 1-indexed line number.
        line: usize,
        /// What went wrong.
        message: String,
    },
}

/// Provenance tag for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quality {
    /// Scripted controller with small exploration noise.
    Expert,
    /// Scripted controller with large exploration noise.
    Medium,
    /// Half uniform-random episodes, half noisy-controller episodes.
    Replay,
    /// Collected by a planner interacting with a (possibly defective) env.
    Play,
}

impl Quality {
    /// Canonical manifest string.
    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Expert => "expert",
            Quality::Medium => "medium",
            Quality::Replay => "replay",
            Quality::Play => "play",
        }
    }

    /// Parses the canonical string.
    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "expert" => Ok(Quality::Expert),
            "medium" => Ok(Quality::Medium),
            "replay" => Ok(Quality::Replay),
            "play" => Ok(Quality::Play),
            other => Err(DataError::Invalid(format!("unknown quality tag {other:?}"))),
        }
    }
}

/// One episode: aligned triples (s_t, a_t, r_t) for t = 0..T−1.
///
/// Rewards are stored raw, without any termination penalty; the
/// `terminated_early` flag carries that event so return computations can
/// apply the penalty exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// States s_0..s_{T−1}, each of the env's state dim.
    pub states: Vec<Vec<f64>>,
    /// Actions a_0..a_{T−1} as recorded by the collector: scripted data
    /// stores the executed (clipped) actions, play data stores the planner's
    /// commanded actions before any clipping.
    pub actions: Vec<Vec<f64>>,
    /// Raw per-step rewards r_0..r_{T−1}.
    pub rewards: Vec<f64>,
    /// True when the episode ended by leaving the valid region.
    pub terminated_early: bool,
}

impl Trajectory {
    /// Number of stored steps T.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    /// True when the trajectory holds no steps.
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// A collection of trajectories from one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Which environment produced the data.
    pub env: EnvName,
    /// State dimensionality.
    pub state_dim: usize,
    /// Action dimensionality.
    pub action_dim: usize,
    /// Provenance tag.
    pub quality: Quality,
    /// Seed the generator was run with.
    pub seed: u64,
    /// The episodes.
    pub episodes: Vec<Trajectory>,
}

impl Dataset {
    /// Checks the structural invariants: consistent dims, finite rewards,
    /// and at least two steps per trajectory.
    pub fn validate(&self) -> Result<(), DataError> {
        for (e, traj) in self.episodes.iter().enumerate() {
            let t = traj.len();
            if t < 2 {
                return Err(DataError::Invalid(format!("episode {e} has {t} steps, need >= 2")));
            }
            if traj.actions.len() != t || traj.rewards.len() != t {
                return Err(DataError::Invalid(format!(
                    "episode {e}: {} states, {} actions, {} rewards",
                    t,
                    traj.actions.len(),
                    traj.rewards.len()
                )));
            }
            for (i, s) in traj.states.iter().enumerate() {
                if s.len() != self.state_dim {
                    return Err(DataError::Invalid(format!(
                        "episode {e} step {i}: state dim {} != {}",
                        s.len(),
                        self.state_dim
                    )));
                }
            }
            for (i, a) in traj.actions.iter().enumerate() {
                if a.len() != self.action_dim {
                    return Err(DataError::Invalid(format!(
                        "episode {e} step {i}: action dim {} != {}",
                        a.len(),
                        self.action_dim
                    )));
                }
            }
            if traj.rewards.iter().any(|r| !r.is_finite()) {
                return Err(DataError::Invalid(format!("episode {e} has a non-finite reward")));
            }
        }
        Ok(())
    }

    /// Total steps across all episodes.
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Trajectory::len).sum()
    }
}
