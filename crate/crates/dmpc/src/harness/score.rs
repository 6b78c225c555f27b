//! Normalized scoring: returns are mapped to `100·(raw − random)/(expert −
//! random)` using per-env reference returns calibrated once (100 episodes of
//! a uniform-random policy and of the scripted expert) and cached in a text
//! `key = value` file.

use super::HarnessError;
use crate::data::scripted_action;
use crate::envs::EnvSpec;
use crate::planners::{mpc_run, Agent, EpisodeRecord, PlannerError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Episodes per policy used to calibrate references.
pub const REF_EPISODES: usize = 100;

/// Mean penalized returns of the two reference policies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRefs {
    /// Mean return of the uniform-random policy.
    pub random: f64,
    /// Mean return of the scripted expert.
    pub expert: f64,
}

/// Normalized score: 100 at the expert reference, 0 at the random one.
pub fn normalized_score(raw: f64, refs: &ScoreRefs) -> f64 {
    100.0 * (raw - refs.random) / (refs.expert - refs.random)
}

/// Uniform-random policy over the action bounds.
pub struct RandomAgent {
    /// Per-dimension bounds to draw within.
    pub bounds: Vec<(f64, f64)>,
}

impl Agent for RandomAgent {
    fn act(&mut self, _state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, PlannerError> {
        Ok(self.bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect())
    }
}

/// Deterministic scripted controller used as the expert reference.
pub struct ScriptedAgent {
    /// Environment whose script to follow.
    pub spec: EnvSpec,
}

impl Agent for ScriptedAgent {
    fn act(&mut self, state: &[f64], _rng: &mut ChaCha8Rng) -> Result<Vec<f64>, PlannerError> {
        Ok(scripted_action(&self.spec, state))
    }
}

fn mean_return(records: &[EpisodeRecord]) -> f64 {
    records.iter().map(|r| r.total_reward).sum::<f64>() / records.len() as f64
}

/// Runs both reference policies for `episodes` seeded episodes each.
pub fn calibrate_refs(
    spec: &EnvSpec,
    episodes: usize,
    seed: u64,
) -> Result<ScoreRefs, HarnessError> {
    if episodes == 0 {
        return Err(HarnessError::Invalid("calibration needs at least one episode".into()));
    }
    let mut random = RandomAgent { bounds: spec.action_bounds.clone() };
    let random_recs = mpc_run(spec, None, &mut random, episodes, seed)?;
    let mut expert = ScriptedAgent { spec: spec.clone() };
    let expert_recs = mpc_run(spec, None, &mut expert, episodes, seed)?;
    Ok(ScoreRefs { random: mean_return(&random_recs), expert: mean_return(&expert_recs) })
}

fn parse_refs_file(path: &Path) -> Result<BTreeMap<String, f64>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::ConfigSyntax {
            path: path.display().to_string(),
            line: i + 1,
            message: format!("expected `key = value`, found {line:?}"),
        })?;
        let value = v.trim().parse().map_err(|_| HarnessError::ConfigSyntax {
            path: path.display().to_string(),
            line: i + 1,
            message: format!("reference value {:?} is not a number", v.trim()),
        })?;
        map.insert(k.trim().to_string(), value);
    }
    Ok(map)
}

/// Writes (or merges) an env's references into the cache file.
pub fn save_refs(path: &Path, env: &str, refs: &ScoreRefs) -> Result<(), HarnessError> {
    let mut map = if path.exists() { parse_refs_file(path)? } else { BTreeMap::new() };
    map.insert(format!("{env}.random"), refs.random);
    map.insert(format!("{env}.expert"), refs.expert);
    let mut text = String::from("# mean returns of the reference policies, per env\n");
    for (k, v) in &map {
        text.push_str(&format!("{k} = {v:.16e}\n"));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads an env's references; a missing file or entry instructs the caller
/// to run calibration.
pub fn load_refs(path: &Path, env: &str) -> Result<ScoreRefs, HarnessError> {
    let missing = || HarnessError::MissingRefs {
        env: env.to_string(),
        path: path.display().to_string(),
    };
    if !path.exists() {
        return Err(missing());
    }
    let map = parse_refs_file(path)?;
    let random = *map.get(&format!("{env}.random")).ok_or_else(missing)?;
    let expert = *map.get(&format!("{env}.expert")).ok_or_else(missing)?;
    if !(expert - random).is_normal() {
        return Err(HarnessError::Invalid(format!(
            "degenerate references for {env}: random {random}, expert {expert}"
        )));
    }
    Ok(ScoreRefs { random, expert })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_is_zero_at_random_and_hundred_at_expert() {
        let refs = ScoreRefs { random: -40.0, expert: 160.0 };
        assert!((normalized_score(-40.0, &refs) - 0.0).abs() < 1e-12);
        assert!((normalized_score(160.0, &refs) - 100.0).abs() < 1e-12);
        assert!((normalized_score(60.0, &refs) - 50.0).abs() < 1e-12);
        assert!(normalized_score(-100.0, &refs) < 0.0);
    }

    #[test]
    fn calibration_orders_expert_above_random_and_is_deterministic() {
        let spec = EnvSpec::pointmass2d();
        let a = calibrate_refs(&spec, 8, 7).unwrap();
        let b = calibrate_refs(&spec, 8, 7).unwrap();
        assert_eq!(a, b);
        assert!(
            a.expert > a.random + 1.0,
            "expert {} should clear random {}",
            a.expert,
            a.random
        );
    }

    #[test]
    fn refs_file_round_trips_and_merges_envs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refs.txt");
        let refs = ScoreRefs { random: 1.25, expert: 90.5 };
        save_refs(&path, "pointmass2d", &refs).unwrap();
        save_refs(&path, "pendulum", &ScoreRefs { random: -5.0, expert: 2.0 }).unwrap();
        let loaded = load_refs(&path, "pointmass2d").unwrap();
        assert_eq!(loaded, refs);
        let other = load_refs(&path, "pendulum").unwrap();
        assert!((other.random + 5.0).abs() < 1e-12);

        // Re-saving one env must not disturb the other.
        save_refs(&path, "pendulum", &ScoreRefs { random: -6.0, expert: 3.0 }).unwrap();
        assert_eq!(load_refs(&path, "pointmass2d").unwrap(), refs);
    }

    #[test]
    fn missing_refs_instruct_calibration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refs.txt");
        let err = load_refs(&path, "pointmass2d").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("calibrate-refs"), "{msg}");
        assert!(msg.contains("pointmass2d"), "{msg}");

        // File present but env absent: same instruction.
        save_refs(&path, "pendulum", &ScoreRefs { random: 0.0, expert: 1.0 }).unwrap();
        let err = load_refs(&path, "pointmass2d").unwrap_err();
        assert!(err.to_string().contains("calibrate-refs"), "{err}");
    }
}
