// Temporary perf probe; replaced by the criterion suite.
use std::time::Instant;

use dmpc::data::{generate_dataset, Normalizer, PolicyKind};
use dmpc::envs::EnvSpec;
use dmpc::models::{
    ActionProposal, DynamicsKind, DynamicsModel, ModelError, ProposalKind,
};
use dmpc::planners::{ssr_plan, Objective, PlannerConfig, SsrDynamics};
use dmpc::tensor::{IoSpec, NetworkSpec, TokenRole};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct MeanObjective;
impl Objective for MeanObjective {
    fn score(
        &self,
        _state: &[f64],
        states: &[Vec<f64>],
        _actions: &[Vec<f64>],
    ) -> Result<f64, ModelError> {
        Ok(states.iter().map(|s| s[0]).sum::<f64>())
    }
}

fn main() {
    let env = EnvSpec::pointmass2d();
    let ds = generate_dataset(&env, PolicyKind::ScriptedNoisy, 3, 7);
    let normalizer = Normalizer::fit(&ds).unwrap();
    let f = 32;
    let prop_spec = NetworkSpec {
        layers: 2,
        token_dim: 16,
        heads: 4,
        qkv_dim: 32,
        hidden_dim: 64,
        fourier_bases: 16,
        io: IoSpec::Denoiser {
            state_dim: 4,
            action_dim: 2,
            cond_state_tokens: 1,
            cond_action_tokens: 0,
            modeled_tokens: f,
            modeled_role: TokenRole::Action,
        },
    };
    let prop = ActionProposal::from_parts(
        ProposalKind::MsDiff,
        prop_spec.clone(),
        prop_spec.init_params(3).unwrap(),
        normalizer.clone(),
        f,
        env.action_bounds.clone(),
    );
    let dyn_spec = NetworkSpec {
        layers: 2,
        token_dim: 16,
        heads: 4,
        qkv_dim: 32,
        hidden_dim: 64,
        fourier_bases: 16,
        io: IoSpec::Denoiser {
            state_dim: 4,
            action_dim: 2,
            cond_state_tokens: 1,
            cond_action_tokens: f,
            modeled_tokens: f,
            modeled_role: TokenRole::State,
        },
    };
    let dynamics = DynamicsModel::from_parts(
        DynamicsKind::MsDiff,
        dyn_spec.clone(),
        dyn_spec.init_params(4).unwrap(),
        normalizer,
        f,
        4,
        2,
    );
    let config = PlannerConfig { samples: 64, horizon: f, ..PlannerConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let state = [0.1, -0.2, 0.0, 0.0];
    // Warm.
    let _ = ssr_plan(&state, &[], &prop, SsrDynamics::Model(&dynamics), &MeanObjective, None, &config, &mut rng).unwrap();
    let t0 = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        let _ = ssr_plan(&state, &[], &prop, SsrDynamics::Model(&dynamics), &MeanObjective, None, &config, &mut rng).unwrap();
    }
    println!("desk D-MPC query (model dynamics): {:.1} ms", 1e3 * t0.elapsed().as_secs_f64() / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = ssr_plan(&state, &[], &prop, SsrDynamics::Env(&env), &MeanObjective, None, &config, &mut rng).unwrap();
    }
    println!("desk oracle query (env dynamics): {:.1} ms", 1e3 * t0.elapsed().as_secs_f64() / reps as f64);
}
