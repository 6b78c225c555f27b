//! Model persistence: one directory per model holding a binary parameter
//! checkpoint (`params.ckpt`), a text descriptor (`model.txt`), and the
//! fitted normalizer (`normalizer.txt`). MBOP component sets store one
//! checkpoint per ensemble member and head.
//!
//! The descriptor is flat `key=value` text carrying the full network shape,
//! so loading does not depend on preset defaults staying stable.

use super::{
    ActionProposal, DynamicsKind, DynamicsModel, MbopComponents, ModelError, ObjectiveModel,
    ProposalKind, TargetScale,
};
use crate::data::{DataError, Normalizer};
use crate::tensor::{
    load_checkpoint, save_checkpoint, IoSpec, NetworkSpec, ParamSet, TokenRole,
};
use std::collections::HashMap;
use std::path::Path;

const PARAMS: &str = "params.ckpt";
const DESCRIPTOR: &str = "model.txt";
const NORMALIZER: &str = "normalizer.txt";

fn io_err(e: std::io::Error) -> ModelError {
    ModelError::Data(DataError::Io(e))
}

fn invalid(path: &Path, message: String) -> ModelError {
    ModelError::Invalid(format!("{}: {message}", path.display()))
}

/// Appends the full network shape to a descriptor.
fn push_spec(out: &mut String, spec: &NetworkSpec) {
    out.push_str(&format!(
        "layers={}\ntoken_dim={}\nheads={}\nqkv_dim={}\nhidden_dim={}\nfourier_bases={}\n",
        spec.layers, spec.token_dim, spec.heads, spec.qkv_dim, spec.hidden_dim, spec.fourier_bases,
    ));
    match &spec.io {
        IoSpec::Mlp { input_dim, output_dim } => {
            out.push_str(&format!("io=mlp\ninput_dim={input_dim}\noutput_dim={output_dim}\n"));
        }
        IoSpec::Denoiser {
            state_dim,
            action_dim,
            cond_state_tokens,
            cond_action_tokens,
            modeled_tokens,
            modeled_role,
        } => {
            let role = match modeled_role {
                TokenRole::State => "state",
                TokenRole::Action => "action",
            };
            out.push_str(&format!(
                "io=denoiser\nio_state_dim={state_dim}\nio_action_dim={action_dim}\n\
                 cond_state_tokens={cond_state_tokens}\ncond_action_tokens={cond_action_tokens}\n\
                 modeled_tokens={modeled_tokens}\nmodeled_role={role}\n"
            ));
        }
        IoSpec::Regressor { state_dim, action_dim, state_tokens, action_tokens } => {
            out.push_str(&format!(
                "io=regressor\nio_state_dim={state_dim}\nio_action_dim={action_dim}\n\
                 state_tokens={state_tokens}\naction_tokens={action_tokens}\n"
            ));
        }
        IoSpec::Causal { state_dim, action_dim, attn_window } => {
            out.push_str(&format!(
                "io=causal\nio_state_dim={state_dim}\nio_action_dim={action_dim}\n\
                 attn_window={attn_window}\n"
            ));
        }
    }
}

/// Reads a `key=value` descriptor into a map; later keys override earlier.
fn read_kv(path: &Path) -> Result<HashMap<String, String>, ModelError> {
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(path, format!("line {}: expected key=value", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn get<'a>(
    map: &'a HashMap<String, String>,
    path: &Path,
    key: &str,
) -> Result<&'a str, ModelError> {
    map.get(key).map(String::as_str).ok_or_else(|| invalid(path, format!("missing key {key}")))
}

fn get_usize(
    map: &HashMap<String, String>,
    path: &Path,
    key: &str,
) -> Result<usize, ModelError> {
    get(map, path, key)?
        .parse()
        .map_err(|_| invalid(path, format!("key {key} is not an unsigned integer")))
}

fn get_f64(map: &HashMap<String, String>, path: &Path, key: &str) -> Result<f64, ModelError> {
    get(map, path, key)?
        .parse()
        .map_err(|_| invalid(path, format!("key {key} is not a real number")))
}

fn spec_from_map(map: &HashMap<String, String>, path: &Path) -> Result<NetworkSpec, ModelError> {
    let io = match get(map, path, "io")? {
        "mlp" => IoSpec::Mlp {
            input_dim: get_usize(map, path, "input_dim")?,
            output_dim: get_usize(map, path, "output_dim")?,
        },
        "denoiser" => IoSpec::Denoiser {
            state_dim: get_usize(map, path, "io_state_dim")?,
            action_dim: get_usize(map, path, "io_action_dim")?,
            cond_state_tokens: get_usize(map, path, "cond_state_tokens")?,
            cond_action_tokens: get_usize(map, path, "cond_action_tokens")?,
            modeled_tokens: get_usize(map, path, "modeled_tokens")?,
            modeled_role: match get(map, path, "modeled_role")? {
                "state" => TokenRole::State,
                "action" => TokenRole::Action,
                other => return Err(invalid(path, format!("unknown modeled_role {other:?}"))),
            },
        },
        "regressor" => IoSpec::Regressor {
            state_dim: get_usize(map, path, "io_state_dim")?,
            action_dim: get_usize(map, path, "io_action_dim")?,
            state_tokens: get_usize(map, path, "state_tokens")?,
            action_tokens: get_usize(map, path, "action_tokens")?,
        },
        "causal" => IoSpec::Causal {
            state_dim: get_usize(map, path, "io_state_dim")?,
            action_dim: get_usize(map, path, "io_action_dim")?,
            attn_window: get_usize(map, path, "attn_window")?,
        },
        other => return Err(invalid(path, format!("unknown io kind {other:?}"))),
    };
    Ok(NetworkSpec {
        layers: get_usize(map, path, "layers")?,
        token_dim: get_usize(map, path, "token_dim")?,
        heads: get_usize(map, path, "heads")?,
        qkv_dim: get_usize(map, path, "qkv_dim")?,
        hidden_dim: get_usize(map, path, "hidden_dim")?,
        fourier_bases: get_usize(map, path, "fourier_bases")?,
        io,
    })
}

fn check_family(
    map: &HashMap<String, String>,
    path: &Path,
    want: &str,
) -> Result<(), ModelError> {
    let got = get(map, path, "family")?;
    if got != want {
        return Err(invalid(path, format!("expected a {want} model, found {got:?}")));
    }
    Ok(())
}

fn write_descriptor(dir: &Path, body: &str) -> Result<(), ModelError> {
    std::fs::write(dir.join(DESCRIPTOR), body).map_err(io_err)
}

/// Saves a proposal model into `dir` (created if needed).
pub fn save_proposal(model: &ActionProposal, dir: &Path) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir).map_err(io_err)?;
    save_checkpoint(&dir.join(PARAMS), &model.params)?;
    model.normalizer.save(&dir.join(NORMALIZER))?;
    let mut body = String::from("family=proposal\n");
    body.push_str(&format!("kind={}\nhorizon={}\n", model.kind.as_str(), model.horizon));
    for (j, (lo, hi)) in model.action_bounds.iter().enumerate() {
        body.push_str(&format!("bound{j}={lo:.16e} {hi:.16e}\n"));
    }
    push_spec(&mut body, &model.spec);
    write_descriptor(dir, &body)
}

/// Loads a proposal model saved by [`save_proposal`].
pub fn load_proposal(dir: &Path) -> Result<ActionProposal, ModelError> {
    let desc = dir.join(DESCRIPTOR);
    let map = read_kv(&desc)?;
    check_family(&map, &desc, "proposal")?;
    let raw_kind = get(&map, &desc, "kind")?;
    let kind = ProposalKind::parse(raw_kind)
        .ok_or_else(|| invalid(&desc, format!("unknown proposal kind {raw_kind:?}")))?;
    let spec = spec_from_map(&map, &desc)?;
    let mut bounds = Vec::new();
    for j in 0.. {
        match map.get(&format!("bound{j}")) {
            Some(v) => {
                let (lo, hi) = v
                    .split_once(' ')
                    .ok_or_else(|| invalid(&desc, format!("bound{j} is not two numbers")))?;
                let lo = lo
                    .parse()
                    .map_err(|_| invalid(&desc, format!("bound{j} low is not a number")))?;
                let hi = hi
                    .parse()
                    .map_err(|_| invalid(&desc, format!("bound{j} high is not a number")))?;
                bounds.push((lo, hi));
            }
            None => break,
        }
    }
    if bounds.is_empty() {
        return Err(invalid(&desc, "no action bounds recorded".into()));
    }
    let params = load_checkpoint(&dir.join(PARAMS))?;
    let normalizer = Normalizer::load(&dir.join(NORMALIZER))?;
    Ok(ActionProposal::from_parts(
        kind,
        spec,
        params,
        normalizer,
        get_usize(&map, &desc, "horizon")?,
        bounds,
    ))
}

/// Saves a dynamics model into `dir` (created if needed).
pub fn save_dynamics(model: &DynamicsModel, dir: &Path) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir).map_err(io_err)?;
    save_checkpoint(&dir.join(PARAMS), &model.params)?;
    model.normalizer.save(&dir.join(NORMALIZER))?;
    let mut body = String::from("family=dynamics\n");
    body.push_str(&format!(
        "kind={}\nhorizon={}\nstate_dim={}\naction_dim={}\n",
        model.kind.as_str(),
        model.horizon,
        model.state_dim,
        model.action_dim,
    ));
    push_spec(&mut body, &model.spec);
    write_descriptor(dir, &body)
}

/// Loads a dynamics model saved by [`save_dynamics`].
pub fn load_dynamics(dir: &Path) -> Result<DynamicsModel, ModelError> {
    let desc = dir.join(DESCRIPTOR);
    let map = read_kv(&desc)?;
    check_family(&map, &desc, "dynamics")?;
    let raw_kind = get(&map, &desc, "kind")?;
    let kind = DynamicsKind::parse(raw_kind)
        .ok_or_else(|| invalid(&desc, format!("unknown dynamics kind {raw_kind:?}")))?;
    let spec = spec_from_map(&map, &desc)?;
    let params = load_checkpoint(&dir.join(PARAMS))?;
    let normalizer = Normalizer::load(&dir.join(NORMALIZER))?;
    Ok(DynamicsModel::from_parts(
        kind,
        spec,
        params,
        normalizer,
        get_usize(&map, &desc, "horizon")?,
        get_usize(&map, &desc, "state_dim")?,
        get_usize(&map, &desc, "action_dim")?,
    ))
}

/// Saves an objective model into `dir` (created if needed).
pub fn save_objective(model: &ObjectiveModel, dir: &Path) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir).map_err(io_err)?;
    save_checkpoint(&dir.join(PARAMS), &model.params)?;
    model.normalizer.save(&dir.join(NORMALIZER))?;
    let mut body = String::from("family=objective\n");
    body.push_str(&format!(
        "horizon={}\nstate_dim={}\naction_dim={}\ntarget_mean={:.16e}\ntarget_std={:.16e}\n",
        model.horizon, model.state_dim, model.action_dim, model.target_scale.mean, model.target_scale.std,
    ));
    push_spec(&mut body, &model.spec);
    write_descriptor(dir, &body)
}

/// Loads an objective model saved by [`save_objective`].
pub fn load_objective(dir: &Path) -> Result<ObjectiveModel, ModelError> {
    let desc = dir.join(DESCRIPTOR);
    let map = read_kv(&desc)?;
    check_family(&map, &desc, "objective")?;
    let spec = spec_from_map(&map, &desc)?;
    let params = load_checkpoint(&dir.join(PARAMS))?;
    let normalizer = Normalizer::load(&dir.join(NORMALIZER))?;
    Ok(ObjectiveModel::from_parts(
        spec,
        params,
        normalizer,
        get_usize(&map, &desc, "horizon")?,
        TargetScale {
            mean: get_f64(&map, &desc, "target_mean")?,
            std: get_f64(&map, &desc, "target_std")?,
        },
        get_usize(&map, &desc, "state_dim")?,
        get_usize(&map, &desc, "action_dim")?,
    ))
}

/// Saves an MBOP component set into `dir` (created if needed).
pub fn save_mbop(model: &MbopComponents, dir: &Path) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir).map_err(io_err)?;
    model.normalizer.save(&dir.join(NORMALIZER))?;
    for (name, members) in [
        ("prop", &model.prop),
        ("dynamics", &model.dynamics),
        ("reward", &model.reward),
        ("value", &model.value),
    ] {
        for (i, params) in members.iter().enumerate() {
            save_checkpoint(&dir.join(format!("{name}_{i}.ckpt")), params)?;
        }
    }
    let body = format!(
        "family=mbop\nk={}\nstate_dim={}\naction_dim={}\nvalue_mean={:.16e}\nvalue_std={:.16e}\n",
        model.k, model.state_dim, model.action_dim, model.value_scale.mean, model.value_scale.std,
    );
    write_descriptor(dir, &body)
}

/// Loads an MBOP component set saved by [`save_mbop`].
pub fn load_mbop(dir: &Path) -> Result<MbopComponents, ModelError> {
    let desc = dir.join(DESCRIPTOR);
    let map = read_kv(&desc)?;
    check_family(&map, &desc, "mbop")?;
    let k = get_usize(&map, &desc, "k")?;
    let state_dim = get_usize(&map, &desc, "state_dim")?;
    let action_dim = get_usize(&map, &desc, "action_dim")?;
    let load_members = |name: &str| -> Result<Vec<ParamSet>, ModelError> {
        (0..k).map(|i| Ok(load_checkpoint(&dir.join(format!("{name}_{i}.ckpt")))?)).collect()
    };
    Ok(MbopComponents {
        k,
        state_dim,
        action_dim,
        normalizer: Normalizer::load(&dir.join(NORMALIZER))?,
        value_scale: TargetScale {
            mean: get_f64(&map, &desc, "value_mean")?,
            std: get_f64(&map, &desc, "value_std")?,
        },
        prop_spec: super::mbop::mlp_spec(state_dim + action_dim, action_dim),
        prop: load_members("prop")?,
        dyn_spec: super::mbop::mlp_spec(state_dim + action_dim, state_dim),
        dynamics: load_members("dynamics")?,
        reward_spec: super::mbop::mlp_spec(state_dim + action_dim, 1),
        reward: load_members("reward")?,
        value_spec: super::mbop::mlp_spec(state_dim + action_dim, 1),
        value: load_members("value")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, PolicyKind};
    use crate::envs::EnvSpec;
    use crate::models::{MbopModel, MbopTrainConfig, Preset, TrainConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dataset() -> crate::data::Dataset {
        generate_dataset(&EnvSpec::pointmass2d(), PolicyKind::ScriptedNoisy, 3, 5)
    }

    #[test]
    fn proposal_roundtrip_preserves_behavior_and_is_idempotent() {
        let ds = tiny_dataset();
        let cfg = TrainConfig::standard(30, 4, 7);
        let model =
            ActionProposal::train(&ds, ProposalKind::MsDiff, Preset::Desk, 4, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        save_proposal(&model, &d1).unwrap();
        let loaded = load_proposal(&d1).unwrap();
        assert_eq!(loaded.kind, model.kind);
        assert_eq!(loaded.horizon, model.horizon);
        assert_eq!(loaded.action_bounds, model.action_bounds);

        // Checkpoint storage narrows to f32; behavior must survive that.
        let state = [0.2, 0.1, 0.0, 0.0];
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = model.propose(&state, &[], 2, None, &mut r1).unwrap();
        let b = loaded.propose(&state, &[], 2, None, &mut r2).unwrap();
        for (x, y) in a.actions.iter().flatten().flatten().zip(b.actions.iter().flatten().flatten())
        {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }

        // Save(load(x)) is byte-identical to save(x): f32 narrowing is
        // idempotent and the text files are deterministic.
        let d2 = dir.path().join("b");
        save_proposal(&loaded, &d2).unwrap();
        for f in [PARAMS, DESCRIPTOR, NORMALIZER] {
            let x = std::fs::read(d1.join(f)).unwrap();
            let y = std::fs::read(d2.join(f)).unwrap();
            assert_eq!(x, y, "{f} differs after a save/load cycle");
        }
    }

    #[test]
    fn dynamics_and_objective_roundtrip() {
        let ds = tiny_dataset();
        let cfg = TrainConfig::standard(30, 4, 7);
        let dyn_model =
            DynamicsModel::train(&ds, DynamicsKind::SsMlp, Preset::Desk, 1, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dynamics(&dyn_model, dir.path()).unwrap();
        let loaded = load_dynamics(dir.path()).unwrap();
        assert_eq!(loaded.kind, dyn_model.kind);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = [0.1, 0.2, 0.0, 0.0];
        let p1 = dyn_model.step_one(&s, &[0.3, -0.1], &mut rng).unwrap();
        let p2 = loaded.step_one(&s, &[0.3, -0.1], &mut rng).unwrap();
        for (x, y) in p1.iter().zip(&p2) {
            assert!((x - y).abs() < 1e-3);
        }

        let obj = ObjectiveModel::train(&ds, Preset::Desk, 4, 0.99, 100.0, &cfg).unwrap();
        let odir = tempfile::tempdir().unwrap();
        save_objective(&obj, odir.path()).unwrap();
        let oload = load_objective(odir.path()).unwrap();
        assert_eq!(oload.horizon, obj.horizon);
        let states = vec![vec![0.1, 0.1, 0.0, 0.0]; 4];
        let actions = vec![vec![0.2, 0.2]; 4];
        let s1 = obj.score(&s, &states, &actions).unwrap();
        let s2 = oload.score(&s, &states, &actions).unwrap();
        assert!((s1 - s2).abs() < 1e-2 * s1.abs().max(1.0), "{s1} vs {s2}");
    }

    #[test]
    fn mbop_roundtrip_preserves_members() {
        let ds = tiny_dataset();
        let cfg = MbopTrainConfig { k: 2, ..MbopTrainConfig::standard(30, 8, 3) };
        let model = MbopComponents::train(&ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_mbop(&model, dir.path()).unwrap();
        let loaded = load_mbop(dir.path()).unwrap();
        assert_eq!(loaded.ensemble_size(), 2);
        let s = [0.1, 0.2, 0.0, 0.0];
        let a = [0.3, -0.2];
        for l in 0..2 {
            let p1 = model.prop(l, &s, &a).unwrap();
            let p2 = loaded.prop(l, &s, &a).unwrap();
            for (x, y) in p1.iter().zip(&p2) {
                assert!((x - y).abs() < 1e-3);
            }
        }
        let v1 = model.mean_value(&s, &a).unwrap();
        let v2 = loaded.mean_value(&s, &a).unwrap();
        assert!((v1 - v2).abs() < 1e-2 * v1.abs().max(1.0));
    }

    #[test]
    fn loading_the_wrong_family_is_rejected() {
        let ds = tiny_dataset();
        let cfg = TrainConfig::standard(20, 4, 7);
        let dyn_model =
            DynamicsModel::train(&ds, DynamicsKind::SsMlp, Preset::Desk, 1, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dynamics(&dyn_model, dir.path()).unwrap();
        let err = load_proposal(dir.path()).unwrap_err();
        assert!(err.to_string().contains("expected a proposal model"));
    }
}
