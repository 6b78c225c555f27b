//! Experiment configuration: a flat `key = value` text format with
//! `[section]` headers, and the typed [`ExperimentConfig`] built from it.
//!
//! Grammar: blank lines and lines whose first non-space character is `#`
//! are ignored; `[name]` opens a section; every other line must read
//! `key = value` and assigns into the current section (keys before any
//! header live in the unnamed root section). Later assignments override
//! earlier ones.

use super::HarnessError;
use crate::envs::{DefectSpec, EnvName, EnvSpec};
use crate::models::Preset;
use crate::planners::{NovelObjective, PlannerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Parsed config text: section → key → value.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

fn qualify(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

impl ConfigMap {
    /// Parses config text; `label` names the source in errors.
    pub fn parse(text: &str, label: &str) -> Result<ConfigMap, HarnessError> {
        let mut map = ConfigMap::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| HarnessError::ConfigSyntax {
                    path: label.to_string(),
                    line: i + 1,
                    message: "section header missing closing `]`".into(),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::ConfigSyntax {
                path: label.to_string(),
                line: i + 1,
                message: format!("expected `key = value`, found {line:?}"),
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(HarnessError::ConfigSyntax {
                    path: label.to_string(),
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            map.sections
                .entry(section.clone())
                .or_default()
                .insert(key.to_string(), v.trim().to_string());
        }
        Ok(map)
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<ConfigMap, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        ConfigMap::parse(&text, &path.display().to_string())
    }

    /// Raw lookup.
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    /// Whether the section was declared (or holds any key).
    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    /// Lookup that fails with the qualified key name.
    pub fn require(&self, section: &str, key: &str) -> Result<&str, HarnessError> {
        self.get(section, key).ok_or_else(|| HarnessError::ConfigKey {
            key: qualify(section, key),
            message: "missing".into(),
        })
    }

    fn typed<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        what: &str,
    ) -> Result<Option<T>, HarnessError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| HarnessError::ConfigKey {
                key: qualify(section, key),
                message: format!("expected {what}, found {v:?}"),
            }),
        }
    }

    /// Unsigned integer with a default.
    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize, HarnessError> {
        Ok(self.typed(section, key, "an unsigned integer")?.unwrap_or(default))
    }

    /// u64 with a default.
    pub fn u64_or(&self, section: &str, key: &str, default: u64) -> Result<u64, HarnessError> {
        Ok(self.typed(section, key, "an unsigned integer")?.unwrap_or(default))
    }

    /// Real number with a default.
    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64, HarnessError> {
        Ok(self.typed(section, key, "a real number")?.unwrap_or(default))
    }

    /// Required unsigned integer.
    pub fn require_usize(&self, section: &str, key: &str) -> Result<usize, HarnessError> {
        self.require(section, key)?;
        Ok(self.typed(section, key, "an unsigned integer")?.expect("key present"))
    }

    /// Required real number.
    pub fn require_f64(&self, section: &str, key: &str) -> Result<f64, HarnessError> {
        self.require(section, key)?;
        Ok(self.typed(section, key, "a real number")?.expect("key present"))
    }
}

/// Which planner an experiment evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerChoice {
    /// Sample-score-rank over a proposal, dynamics source, and objective.
    Dmpc,
    /// MBOP-TrajOpt over its component set.
    Mbop,
    /// A distilled reactive policy.
    Distilled,
}

impl PlannerChoice {
    /// Canonical name.
    pub fn as_str(self) -> &'static str {
        match self {
            PlannerChoice::Dmpc => "dmpc",
            PlannerChoice::Mbop => "mbop",
            PlannerChoice::Distilled => "distilled",
        }
    }

    /// Inverse of [`Self::as_str`].
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dmpc" => Some(PlannerChoice::Dmpc),
            "mbop" => Some(PlannerChoice::Mbop),
            "distilled" => Some(PlannerChoice::Distilled),
            _ => None,
        }
    }
}

/// A fully resolved experiment: env, planner wiring, seeds, and outputs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Environment under evaluation.
    pub env: EnvSpec,
    /// Planner family.
    pub choice: PlannerChoice,
    /// Planner settings (samples, horizon, history, weights, chunk).
    pub planner: PlannerConfig,
    /// Model scale preset.
    pub preset: Preset,
    /// Saved proposal directory (D-MPC).
    pub proposal_dir: Option<PathBuf>,
    /// Saved dynamics directory; `None` with `oracle_dynamics` uses the env.
    pub dynamics_dir: Option<PathBuf>,
    /// Use the true environment as the dynamics source.
    pub oracle_dynamics: bool,
    /// Saved objective directory; `None` with `oracle_objective` replays the env.
    pub objective_dir: Option<PathBuf>,
    /// Score candidates by replaying them through the true environment.
    pub oracle_objective: bool,
    /// Discount for the oracle objective.
    pub gamma: f64,
    /// Saved MBOP component directory.
    pub mbop_dir: Option<PathBuf>,
    /// Saved distilled-policy directory.
    pub policy_dir: Option<PathBuf>,
    /// Optional dataset path used by training/eval subcommands.
    pub dataset: Option<PathBuf>,
    /// Optional novel reward J̃.
    pub novel: Option<NovelObjective>,
    /// Optional actuator defect applied at execution time.
    pub defect: Option<DefectSpec>,
    /// Episode count when no explicit seed list is given.
    pub episodes: usize,
    /// Master seed.
    pub seed: u64,
    /// Explicit per-episode seeds (overrides `episodes`).
    pub explicit_seeds: Option<Vec<u64>>,
    /// Report directory.
    pub out_dir: PathBuf,
    /// Score-reference file.
    pub refs_path: PathBuf,
    /// How many episode traces to render as SVG.
    pub traces: usize,
}

fn opt_path(map: &ConfigMap, section: &str, key: &str) -> Option<PathBuf> {
    map.get(section, key).map(PathBuf::from)
}

impl ExperimentConfig {
    /// Builds a config from parsed text, filling defaults.
    pub fn from_map(map: &ConfigMap) -> Result<ExperimentConfig, HarnessError> {
        let env_name = map.get("experiment", "env").unwrap_or("pointmass2d");
        let env = EnvSpec::for_name(EnvName::parse(env_name).map_err(|_| {
            HarnessError::ConfigKey {
                key: "experiment.env".into(),
                message: format!("unknown environment {env_name:?}"),
            }
        })?);

        let choice_name = map.get("planner", "kind").unwrap_or("dmpc");
        let choice = PlannerChoice::parse(choice_name).ok_or_else(|| HarnessError::ConfigKey {
            key: "planner.kind".into(),
            message: format!("expected dmpc, mbop, or distilled, found {choice_name:?}"),
        })?;

        let defaults = PlannerConfig::default();
        let planner = PlannerConfig {
            samples: map.usize_or("planner", "samples", defaults.samples)?,
            horizon: map.usize_or("planner", "horizon", defaults.horizon)?,
            history: map.usize_or("planner", "history", defaults.history)?,
            kappa: map.f64_or("planner", "kappa", defaults.kappa)?,
            kappa_novel: map.f64_or("planner", "kappa_novel", defaults.kappa_novel)?,
            mbop_kappa: map.f64_or("planner", "mbop_kappa", defaults.mbop_kappa)?,
            mbop_sigma2: map.f64_or("planner", "mbop_sigma2", defaults.mbop_sigma2)?,
            mbop_beta: map.f64_or("planner", "mbop_beta", defaults.mbop_beta)?,
            chunk: map.usize_or("planner", "chunk", defaults.chunk)?,
        };

        let preset_name = map.get("experiment", "preset").unwrap_or("desk");
        let preset = Preset::parse(preset_name).ok_or_else(|| HarnessError::ConfigKey {
            key: "experiment.preset".into(),
            message: format!("expected desk or paper, found {preset_name:?}"),
        })?;

        let dynamics_raw = map.get("models", "dynamics");
        let oracle_dynamics = dynamics_raw == Some("oracle");
        let objective_raw = map.get("models", "objective");
        let oracle_objective = objective_raw == Some("oracle");

        let novel = if map.has_section("novel") {
            Some(NovelObjective::GaussianOnCoordinate {
                coord: map.require_usize("novel", "coord")?,
                target: map.require_f64("novel", "target")?,
                variance: map.require_f64("novel", "variance")?,
                scale: map.require_f64("novel", "scale")?,
            })
        } else {
            None
        };

        let defect = if map.has_section("defect") {
            Some(DefectSpec {
                dim: map.require_usize("defect", "dim")?,
                fraction: map.require_f64("defect", "fraction")?,
            })
        } else {
            None
        };

        let explicit_seeds = match map.get("experiment", "seeds") {
            None => None,
            Some(list) => {
                let mut seeds = Vec::new();
                for part in list.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    seeds.push(part.parse().map_err(|_| HarnessError::ConfigKey {
                        key: "experiment.seeds".into(),
                        message: format!("expected comma-separated integers, found {part:?}"),
                    })?);
                }
                Some(seeds)
            }
        };

        Ok(ExperimentConfig {
            env,
            choice,
            planner,
            preset,
            proposal_dir: opt_path(map, "models", "proposal"),
            dynamics_dir: dynamics_raw.filter(|v| *v != "oracle").map(PathBuf::from),
            oracle_dynamics,
            objective_dir: objective_raw.filter(|v| *v != "oracle").map(PathBuf::from),
            oracle_objective,
            gamma: map.f64_or("experiment", "gamma", 0.99)?,
            mbop_dir: opt_path(map, "models", "mbop"),
            policy_dir: opt_path(map, "models", "policy"),
            dataset: opt_path(map, "experiment", "dataset"),
            novel,
            defect,
            episodes: map.usize_or("experiment", "episodes", 30)?,
            seed: map.u64_or("experiment", "seed", 0)?,
            explicit_seeds,
            out_dir: PathBuf::from(map.get("experiment", "out").unwrap_or("out")),
            refs_path: PathBuf::from(map.get("experiment", "refs").unwrap_or("refs.txt")),
            traces: map.usize_or("experiment", "traces", 3)?,
        })
    }

    /// Per-episode seeds: the explicit list, or `episodes` draws from the
    /// master seed.
    pub fn resolved_seeds(&self) -> Vec<u64> {
        match &self.explicit_seeds {
            Some(s) => s.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..self.episodes).map(|_| rng.gen()).collect()
            }
        }
    }

    /// Checks invariants: planner settings valid, seeds non-empty, every
    /// referenced model path exists, section wiring consistent.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.planner.validate().map_err(HarnessError::Planner)?;
        if self.resolved_seeds().is_empty() {
            return Err(HarnessError::ConfigKey {
                key: "experiment.seeds".into(),
                message: "no episode seeds (set episodes ≥ 1 or a non-empty seeds list)".into(),
            });
        }
        if let Some(d) = &self.defect {
            d.validate(&self.env).map_err(HarnessError::Env)?;
        }
        if let Some(NovelObjective::GaussianOnCoordinate { coord, variance, .. }) = &self.novel {
            if *coord >= self.env.state_dim {
                return Err(HarnessError::ConfigKey {
                    key: "novel.coord".into(),
                    message: format!(
                        "coordinate {coord} out of range for state dim {}",
                        self.env.state_dim
                    ),
                });
            }
            if *variance <= 0.0 {
                return Err(HarnessError::ConfigKey {
                    key: "novel.variance".into(),
                    message: "must be positive".into(),
                });
            }
        }
        let mut required: Vec<(&str, &Option<PathBuf>)> = Vec::new();
        match self.choice {
            PlannerChoice::Dmpc => {
                required.push(("models.proposal", &self.proposal_dir));
                if !self.oracle_dynamics {
                    required.push(("models.dynamics", &self.dynamics_dir));
                }
                if !self.oracle_objective && self.planner.kappa > 0.0 {
                    required.push(("models.objective", &self.objective_dir));
                }
                if self.planner.kappa_novel > 0.0 && self.novel.is_none() {
                    return Err(HarnessError::ConfigKey {
                        key: "planner.kappa_novel".into(),
                        message: "positive but no [novel] section given".into(),
                    });
                }
            }
            PlannerChoice::Mbop => required.push(("models.mbop", &self.mbop_dir)),
            PlannerChoice::Distilled => required.push(("models.policy", &self.policy_dir)),
        }
        for (key, path) in required {
            match path {
                None => {
                    return Err(HarnessError::ConfigKey {
                        key: key.into(),
                        message: "missing (required by planner.kind)".into(),
                    })
                }
                Some(p) if !p.exists() => {
                    return Err(HarnessError::ConfigKey {
                        key: key.into(),
                        message: format!("path {} does not exist", p.display()),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(p) = &self.dataset {
            if !p.exists() {
                return Err(HarnessError::ConfigKey {
                    key: "experiment.dataset".into(),
                    message: format!("path {} does not exist", p.display()),
                });
            }
        }
        Ok(())
    }
}
