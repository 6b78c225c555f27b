//! Dataset persistence: a key=value manifest plus one CSV of steps.
//!
//! The CSV header is `episode,t,s0..s{d-1},a0..a{m-1},r,terminated`; reals
//! are printed with 17 significant digits so that save → load is lossless.
//! The `terminated` column is 1 only on the final row of an episode that
//! ended by leaving the valid region.

use super::{DataError, Dataset, Quality, Trajectory};
use crate::envs::EnvName;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

const MANIFEST: &str = "manifest.txt";
const EPISODES: &str = "episodes.csv";
const FORMAT_VERSION: &str = "1";

/// Writes `<dir>/manifest.txt` and `<dir>/episodes.csv`, creating `dir` if
/// needed. Deterministic: equal datasets produce byte-identical files.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    dataset.validate()?;
    std::fs::create_dir_all(dir)?;
    let manifest = format!(
        "env={}\nstate_dim={}\naction_dim={}\nepisodes={}\nquality={}\nseed={}\nformat_version={}\n",
        dataset.env,
        dataset.state_dim,
        dataset.action_dim,
        dataset.episodes.len(),
        dataset.quality.as_str(),
        dataset.seed,
        FORMAT_VERSION,
    );
    std::fs::write(dir.join(MANIFEST), manifest)?;

    let mut csv = String::new();
    csv.push_str("episode,t");
    for k in 0..dataset.state_dim {
        csv.push_str(&format!(",s{k}"));
    }
    for k in 0..dataset.action_dim {
        csv.push_str(&format!(",a{k}"));
    }
    csv.push_str(",r,terminated\n");
    for (e, traj) in dataset.episodes.iter().enumerate() {
        let last = traj.len() - 1;
        for t in 0..traj.len() {
            csv.push_str(&format!("{e},{t}"));
            for v in &traj.states[t] {
                csv.push_str(&format!(",{v:.16e}"));
            }
            for v in &traj.actions[t] {
                csv.push_str(&format!(",{v:.16e}"));
            }
            let terminated = t == last && traj.terminated_early;
            csv.push_str(&format!(",{:.16e},{}\n", traj.rewards[t], u8::from(terminated)));
        }
    }
    let mut f = std::fs::File::create(dir.join(EPISODES))?;
    f.write_all(csv.as_bytes())?;
    Ok(())
}

fn parse_manifest(path: &Path) -> Result<HashMap<String, String>, DataError> {
    let shown = path.display().to_string();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut map = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| DataError::Parse {
            path: shown.clone(),
            line: i + 1,
            message: format!("expected key=value, got {line:?}"),
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn manifest_field<'a>(
    map: &'a HashMap<String, String>,
    path: &Path,
    key: &str,
) -> Result<&'a str, DataError> {
    map.get(key).map(String::as_str).ok_or_else(|| DataError::Parse {
        path: path.display().to_string(),
        line: 1,
        message: format!("manifest missing key {key}"),
    })
}

/// Reads a dataset previously written by `save_dataset`.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join(MANIFEST);
    let map = parse_manifest(&manifest_path)?;
    let field = |key: &str| manifest_field(&map, &manifest_path, key);
    let num = |key: &str| -> Result<usize, DataError> {
        field(key)?.parse().map_err(|e| DataError::Parse {
            path: manifest_path.display().to_string(),
            line: 1,
            message: format!("bad {key}: {e}"),
        })
    };
    let version = field("format_version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::Invalid(format!("unsupported format_version {version}")));
    }
    let env = EnvName::parse(field("env")?)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let state_dim = num("state_dim")?;
    let action_dim = num("action_dim")?;
    let episode_count = num("episodes")?;
    let quality = Quality::parse(field("quality")?)?;
    let seed: u64 = field("seed")?.parse().map_err(|e| DataError::Parse {
        path: manifest_path.display().to_string(),
        line: 1,
        message: format!("bad seed: {e}"),
    })?;

    let csv_path = dir.join(EPISODES);
    let shown = csv_path.display().to_string();
    let parse_err = |line: usize, message: String| DataError::Parse {
        path: shown.clone(),
        line,
        message,
    };
    let reader = BufReader::new(std::fs::File::open(&csv_path)?);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty CSV".into()))?;
    let header = header?;
    let mut expect_header = String::from("episode,t");
    for k in 0..state_dim {
        expect_header.push_str(&format!(",s{k}"));
    }
    for k in 0..action_dim {
        expect_header.push_str(&format!(",a{k}"));
    }
    expect_header.push_str(",r,terminated");
    if header != expect_header {
        return Err(parse_err(1, format!("header {header:?} != expected {expect_header:?}")));
    }

    let columns = 2 + state_dim + action_dim + 2;
    let mut episodes: Vec<Trajectory> = Vec::with_capacity(episode_count);
    for (i, line) in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(parse_err(i + 1, format!("{} columns, expected {columns}", fields.len())));
        }
        let episode: usize = fields[0]
            .parse()
            .map_err(|e| parse_err(i + 1, format!("bad episode index: {e}")))?;
        let t: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(i + 1, format!("bad step index: {e}")))?;
        let mut reals = Vec::with_capacity(state_dim + action_dim + 1);
        for f in &fields[2..2 + state_dim + action_dim + 1] {
            reals.push(
                f.parse::<f64>()
                    .map_err(|e| parse_err(i + 1, format!("bad real {f:?}: {e}")))?,
            );
        }
        let terminated = match *fields.last().unwrap() {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(i + 1, format!("bad terminated flag {other:?}"))),
        };
        if episode == episodes.len() && t == 0 {
            episodes.push(Trajectory {
                states: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
                terminated_early: false,
            });
        }
        if episode + 1 != episodes.len() {
            return Err(parse_err(i + 1, format!("row for out-of-order episode {episode}")));
        }
        let traj = episodes.last_mut().unwrap();
        if t != traj.len() {
            return Err(parse_err(i + 1, format!("step {t} out of order, expected {}", traj.len())));
        }
        traj.states.push(reals[..state_dim].to_vec());
        traj.actions.push(reals[state_dim..state_dim + action_dim].to_vec());
        traj.rewards.push(reals[state_dim + action_dim]);
        if terminated {
            traj.terminated_early = true;
        }
    }
    if episodes.len() != episode_count {
        return Err(DataError::Invalid(format!(
            "manifest promises {episode_count} episodes, CSV holds {}",
            episodes.len()
        )));
    }
    let dataset =
        Dataset { env, state_dim, action_dim, quality, seed, episodes };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, PolicyKind};
    use crate::envs::EnvSpec;

    #[test]
    fn save_load_round_trip() {
        let spec = EnvSpec::pointmass2d();
        let ds = generate_dataset(&spec, PolicyKind::ScriptedNoisy, 3, 9);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let spec = EnvSpec::pendulum();
        let ds = generate_dataset(&spec, PolicyKind::ScriptedExpert, 2, 4);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir_a.path()).unwrap();
        save_dataset(&ds, dir_b.path()).unwrap();
        for name in [MANIFEST, EPISODES] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "file {name} differs between identical saves");
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset {
            env: crate::envs::EnvName::Pointmass2d,
            state_dim: 4,
            action_dim: 2,
            quality: Quality::Play,
            seed: 1,
            episodes: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn truncated_csv_is_a_parse_error() {
        let spec = EnvSpec::pointmass2d();
        let ds = generate_dataset(&spec, PolicyKind::ScriptedNoisy, 2, 9);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let csv_path = dir.path().join(EPISODES);
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let cut: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        let cut = cut + "3,0,garbage\n";
        std::fs::write(&csv_path, cut).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 6, .. }), "got {err}");
    }

    #[test]
    fn early_termination_flag_round_trips() {
        let ds = Dataset {
            env: crate::envs::EnvName::Pointmass2d,
            state_dim: 1,
            action_dim: 1,
            quality: Quality::Medium,
            seed: 0,
            episodes: vec![Trajectory {
                states: vec![vec![0.0], vec![1.0], vec![2.0]],
                actions: vec![vec![0.1], vec![0.2], vec![0.3]],
                rewards: vec![0.5, 0.6, 0.7],
                terminated_early: true,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(EPISODES)).unwrap();
        let flags: Vec<&str> =
            text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
        assert_eq!(flags, vec!["0", "0", "1"]);
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.episodes[0].terminated_early);
    }

    #[test]
    fn manifest_missing_key_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST), "env=pointmass2d\n").unwrap();
        std::fs::write(dir.path().join(EPISODES), "episode,t,r,terminated\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing key"), "got {err}");
    }
}
