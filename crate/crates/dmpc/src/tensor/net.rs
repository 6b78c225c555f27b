//! Network architectures: MLP, conditional transformer denoiser, transformer
//! regressor with a readout token, and the causal (autoregressive) dynamics
//! transformer.
//!
//! All four share one parameter convention: [`NetworkSpec::param_order`]
//! defines a canonical name/shape sequence that initialization, forwards,
//! checkpoints, and the optimizer all follow. Transformer blocks are
//! pre-norm (LayerNorm before attention and before the feed-forward) with
//! GeLU nonlinearities; positions get Fourier features (16 bases by default)
//! through a learned projection; the diffusion step enters the denoiser as
//! one sinusoidally-embedded token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, Tape};
use super::{Tensor, TensorError};

/// Network families supported by [`forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Mlp,
    TransformerDenoiser,
    TransformerRegressor,
    CausalTransformer,
}

/// Payload carried by a token group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    State,
    Action,
}

/// Input/output wiring, per network family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IoSpec {
    /// `[B, input_dim] -> [B, output_dim]`.
    Mlp { input_dim: usize, output_dim: usize },
    /// Denoises `modeled_tokens` tokens of the given role, conditioned on
    /// state/action tokens and the diffusion-step token.
    Denoiser {
        state_dim: usize,
        action_dim: usize,
        cond_state_tokens: usize,
        cond_action_tokens: usize,
        modeled_tokens: usize,
        modeled_role: TokenRole,
    },
    /// Scalar regression from state and action tokens via a learned readout
    /// token.
    Regressor {
        state_dim: usize,
        action_dim: usize,
        state_tokens: usize,
        action_tokens: usize,
    },
    /// Interleaved state/action token stream with causal attention limited
    /// to `attn_window` tokens.
    Causal { state_dim: usize, action_dim: usize, attn_window: usize },
}

/// Architecture constants for one network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: usize,
    pub token_dim: usize,
    pub heads: usize,
    /// Total query/key/value width across heads.
    pub qkv_dim: usize,
    /// Feed-forward hidden width (also the MLP hidden width for `Mlp`).
    pub hidden_dim: usize,
    pub fourier_bases: usize,
    pub io: IoSpec,
}

impl NetworkSpec {
    pub fn kind(&self) -> NetKind {
        match self.io {
            IoSpec::Mlp { .. } => NetKind::Mlp,
            IoSpec::Denoiser { .. } => NetKind::TransformerDenoiser,
            IoSpec::Regressor { .. } => NetKind::TransformerRegressor,
            IoSpec::Causal { .. } => NetKind::CausalTransformer,
        }
    }

    /// Checks dimension constraints; every constructor path calls this.
    pub fn validate(&self) -> Result<(), TensorError> {
        let err = |msg: String| Err(TensorError::Invalid(msg));
        if self.layers == 0 {
            return err("layer count must be positive".into());
        }
        if self.hidden_dim == 0 {
            return err("hidden dim must be positive".into());
        }
        match &self.io {
            IoSpec::Mlp { input_dim, output_dim } => {
                if *input_dim == 0 || *output_dim == 0 {
                    return err("mlp input/output dims must be positive".into());
                }
            }
            io => {
                if self.token_dim == 0 || self.token_dim % 2 != 0 {
                    return err(format!("token dim must be positive and even, got {}", self.token_dim));
                }
                if self.heads == 0 || self.qkv_dim % self.heads != 0 {
                    return err(format!(
                        "qkv dim {} must divide evenly over {} heads",
                        self.qkv_dim, self.heads
                    ));
                }
                if self.fourier_bases == 0 {
                    return err("fourier basis count must be positive".into());
                }
                match io {
                    IoSpec::Denoiser { state_dim, action_dim, modeled_tokens, modeled_role, .. } => {
                        if *modeled_tokens == 0 {
                            return err("denoiser needs at least one modeled token".into());
                        }
                        let dm = match modeled_role {
                            TokenRole::State => *state_dim,
                            TokenRole::Action => *action_dim,
                        };
                        if dm == 0 {
                            return err("modeled token payload dim must be positive".into());
                        }
                    }
                    IoSpec::Regressor { state_dim, state_tokens, .. } => {
                        if *state_dim == 0 || *state_tokens == 0 {
                            return err("regressor needs state tokens".into());
                        }
                    }
                    IoSpec::Causal { state_dim, action_dim, attn_window } => {
                        if *state_dim == 0 || *action_dim == 0 {
                            return err("causal transformer needs state and action dims".into());
                        }
                        if *attn_window == 0 {
                            return err("attention window must be positive".into());
                        }
                    }
                    IoSpec::Mlp { .. } => unreachable!(),
                }
            }
        }
        Ok(())
    }

    /// Emits the canonical parameter (name, shape) sequence.
    pub fn param_order(&self, mut f: impl FnMut(&str, &[usize])) {
        let d = self.token_dim;
        let p = self.qkv_dim;
        let h = self.hidden_dim;
        match &self.io {
            IoSpec::Mlp { input_dim, output_dim } => {
                let mut prev = *input_dim;
                for l in 0..self.layers {
                    f(&format!("fc{l}.w"), &[prev, h]);
                    f(&format!("fc{l}.b"), &[h]);
                    prev = h;
                }
                f("out.w", &[prev, *output_dim]);
                f("out.b", &[*output_dim]);
                return;
            }
            IoSpec::Denoiser { state_dim, action_dim, .. } => {
                f("proj_time.w", &[d, d]);
                f("proj_time.b", &[d]);
                if self.uses_state_tokens() {
                    f("proj_state.w", &[*state_dim, d]);
                    f("proj_state.b", &[d]);
                }
                if self.uses_action_tokens() {
                    f("proj_action.w", &[*action_dim, d]);
                    f("proj_action.b", &[d]);
                }
            }
            IoSpec::Regressor { state_dim, action_dim, action_tokens, .. } => {
                f("readout", &[1, d]);
                f("proj_state.w", &[*state_dim, d]);
                f("proj_state.b", &[d]);
                if *action_tokens > 0 {
                    f("proj_action.w", &[*action_dim, d]);
                    f("proj_action.b", &[d]);
                }
            }
            IoSpec::Causal { state_dim, action_dim, .. } => {
                f("proj_state.w", &[*state_dim, d]);
                f("proj_state.b", &[d]);
                f("proj_action.w", &[*action_dim, d]);
                f("proj_action.b", &[d]);
                f("ln_embed.g", &[d]);
                f("ln_embed.b", &[d]);
            }
        }
        f("pos.w", &[2 * self.fourier_bases, d]);
        for l in 0..self.layers {
            f(&format!("layer{l}.ln1.g"), &[d]);
            f(&format!("layer{l}.ln1.b"), &[d]);
            f(&format!("layer{l}.attn.q.w"), &[d, p]);
            f(&format!("layer{l}.attn.q.b"), &[p]);
            f(&format!("layer{l}.attn.k.w"), &[d, p]);
            f(&format!("layer{l}.attn.k.b"), &[p]);
            f(&format!("layer{l}.attn.v.w"), &[d, p]);
            f(&format!("layer{l}.attn.v.b"), &[p]);
            f(&format!("layer{l}.attn.o.w"), &[p, d]);
            f(&format!("layer{l}.attn.o.b"), &[d]);
            f(&format!("layer{l}.ln2.g"), &[d]);
            f(&format!("layer{l}.ln2.b"), &[d]);
            f(&format!("layer{l}.mlp.fc1.w"), &[d, h]);
            f(&format!("layer{l}.mlp.fc1.b"), &[h]);
            f(&format!("layer{l}.mlp.fc2.w"), &[h, d]);
            f(&format!("layer{l}.mlp.fc2.b"), &[d]);
        }
        f("final_ln.g", &[d]);
        f("final_ln.b", &[d]);
        match &self.io {
            IoSpec::Denoiser { state_dim, action_dim, modeled_role, .. } => {
                let dm = match modeled_role {
                    TokenRole::State => *state_dim,
                    TokenRole::Action => *action_dim,
                };
                f("out.w", &[d, dm]);
                f("out.b", &[dm]);
            }
            IoSpec::Regressor { .. } => {
                f("out.w", &[d, 1]);
                f("out.b", &[1]);
            }
            IoSpec::Causal { state_dim, action_dim, .. } => {
                f("out_action.w", &[d, *action_dim]);
                f("out_action.b", &[*action_dim]);
                f("out_state.w", &[d, *state_dim]);
                f("out_state.b", &[*state_dim]);
            }
            IoSpec::Mlp { .. } => unreachable!(),
        }
    }

    fn uses_state_tokens(&self) -> bool {
        matches!(
            self.io,
            IoSpec::Denoiser { cond_state_tokens, modeled_role, .. }
                if cond_state_tokens > 0 || modeled_role == TokenRole::State
        )
    }

    fn uses_action_tokens(&self) -> bool {
        matches!(
            self.io,
            IoSpec::Denoiser { cond_action_tokens, modeled_role, .. }
                if cond_action_tokens > 0 || modeled_role == TokenRole::Action
        )
    }

    /// (name, shape) pairs in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.param_order(|name, shape| out.push((name.to_string(), shape.to_vec())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.param_order(|_, shape| n += shape.iter().product::<usize>());
        n
    }

    /// Fresh parameters: truncated-normal (std 0.02, clipped at two sigma)
    /// weights, zero biases, unit LayerNorm gains.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet, TensorError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        self.param_order(|name, shape| {
            let n: usize = shape.iter().product();
            let values = if name.ends_with(".g") {
                vec![1.0; n]
            } else if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| trunc_normal(&mut rng, 0.02)).collect()
            };
            entries.push((name.to_string(), Tensor::from_raw(shape.to_vec(), values)));
        });
        Ok(ParamSet { entries })
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        if z.abs() <= 2.0 {
            return std * z;
        }
    }
}

/// Named, ordered parameter tensors for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks that names and shapes match the spec's canonical order.
    pub fn check_layout(&self, spec: &NetworkSpec) -> Result<(), TensorError> {
        let shapes = spec.param_shapes();
        if shapes.len() != self.entries.len() {
            return Err(TensorError::Invalid(format!(
                "param set has {} tensors, spec wants {}",
                self.entries.len(),
                shapes.len()
            )));
        }
        for ((name, shape), (have_name, have)) in shapes.iter().zip(&self.entries) {
            if name != have_name || shape.as_slice() != have.dims() {
                return Err(TensorError::Invalid(format!(
                    "param mismatch: want {name} {shape:?}, have {have_name} {:?}",
                    have.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Registers every parameter on the tape, in canonical order.
pub fn bind_params<'a>(tape: &mut Tape<'a>, params: &'a ParamSet) -> Vec<NodeId> {
    (0..params.len()).map(|i| tape.param(params.tensor(i))).collect()
}

/// Cursor that hands out bound parameter ids in canonical order.
struct Cursor<'c> {
    ids: &'c [NodeId],
    names: &'c ParamSet,
    i: usize,
}

impl<'c> Cursor<'c> {
    fn next(&mut self, expect: &str) -> NodeId {
        debug_assert_eq!(self.names.name(self.i), expect, "param order drift");
        let id = self.ids[self.i];
        self.i += 1;
        id
    }
    fn next2(&mut self, w: &str, b: &str) -> (NodeId, NodeId) {
        (self.next(w), self.next(b))
    }
}

/// Inputs for [`forward`].
pub enum NetInput<'i> {
    Mlp { x: &'i Tensor },
    Denoiser { x: &'i Tensor, k: usize, cond_states: &'i Tensor, cond_actions: &'i Tensor },
    Regressor { states: &'i Tensor, actions: &'i Tensor },
    /// Teacher-forced stream: `states` row t pairs with `actions` row t.
    Causal { states: &'i Tensor, actions: &'i Tensor },
}

/// Both causal heads: action predictions above state tokens, next-state
/// predictions above action tokens.
#[derive(Debug, Clone)]
pub struct CausalOutput {
    pub pred_actions: Tensor,
    pub pred_states: Tensor,
}

/// Inference forward. For `Causal` inputs this returns the next-state head;
/// use [`causal_forward`] when both heads are needed.
pub fn forward(
    spec: &NetworkSpec,
    params: &ParamSet,
    input: &NetInput,
) -> Result<Tensor, TensorError> {
    match input {
        NetInput::Mlp { x } => mlp_forward(spec, params, x),
        NetInput::Denoiser { x, k, cond_states, cond_actions } => {
            denoiser_forward(spec, params, x, *k, cond_states, cond_actions)
        }
        NetInput::Regressor { states, actions } => regressor_forward(spec, params, states, actions),
        NetInput::Causal { states, actions } => {
            Ok(causal_forward(spec, params, states, actions)?.pred_states)
        }
    }
}

pub fn mlp_forward(
    spec: &NetworkSpec,
    params: &ParamSet,
    x: &Tensor,
) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, params);
    let xid = tape.leaf(x.clone());
    let out = tape_mlp(&mut tape, spec, &ids, params, xid)?;
    Ok(tape.value(out).clone())
}

pub fn denoiser_forward(
    spec: &NetworkSpec,
    params: &ParamSet,
    x: &Tensor,
    k: usize,
    cond_states: &Tensor,
    cond_actions: &Tensor,
) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, params);
    let xid = tape.leaf(x.clone());
    let cs = tape.leaf(cond_states.clone());
    let ca = tape.leaf(cond_actions.clone());
    let out = tape_denoiser(&mut tape, spec, &ids, params, xid, k, cs, ca)?;
    Ok(tape.value(out).clone())
}

pub fn regressor_forward(
    spec: &NetworkSpec,
    params: &ParamSet,
    states: &Tensor,
    actions: &Tensor,
) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, params);
    let s = tape.leaf(states.clone());
    let a = tape.leaf(actions.clone());
    let out = tape_regressor(&mut tape, spec, &ids, params, s, a)?;
    Ok(tape.value(out).clone())
}

pub fn causal_forward(
    spec: &NetworkSpec,
    params: &ParamSet,
    states: &Tensor,
    actions: &Tensor,
) -> Result<CausalOutput, TensorError> {
    let mask = causal_mask(2 * states.dims()[0], causal_window(spec)?);
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, params);
    let s = tape.leaf(states.clone());
    let a = tape.leaf(actions.clone());
    let (pa, ps) = tape_causal(&mut tape, spec, &ids, params, s, a, &mask)?;
    Ok(CausalOutput {
        pred_actions: tape.value(pa).clone(),
        pred_states: tape.value(ps).clone(),
    })
}

fn causal_window(spec: &NetworkSpec) -> Result<usize, TensorError> {
    match spec.io {
        IoSpec::Causal { attn_window, .. } => Ok(attn_window),
        _ => Err(TensorError::Invalid("not a causal transformer spec".into())),
    }
}

/// Additive attention mask: token i sees tokens `max(0, i-window+1) ..= i`.
pub fn causal_mask(tokens: usize, window: usize) -> Tensor {
    let mut values = vec![f64::NEG_INFINITY; tokens * tokens];
    for i in 0..tokens {
        let lo = i.saturating_sub(window - 1);
        for j in lo..=i {
            values[i * tokens + j] = 0.0;
        }
    }
    Tensor::from_raw(vec![tokens, tokens], values)
}

// ── tape-level builders (training uses these directly) ──────────────────

/// MLP trunk: `layers` ReLU blocks then a linear readout.
pub fn tape_mlp<'a>(
    tape: &mut Tape<'a>,
    spec: &NetworkSpec,
    ids: &[NodeId],
    params: &ParamSet,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    spec.validate()?;
    let mut c = Cursor { ids, names: params, i: 0 };
    let mut h = x;
    for l in 0..spec.layers {
        let (w, b) = c.next2(&format!("fc{l}.w"), &format!("fc{l}.b"));
        let z = tape.matmul(h, w)?;
        let z = tape.add_bias(z, b)?;
        h = tape.relu(z);
    }
    let (w, b) = c.next2("out.w", "out.b");
    let z = tape.matmul(h, w)?;
    tape.add_bias(z, b)
}

/// Denoiser: predicts the noise on the modeled tokens.
#[allow(clippy::too_many_arguments)]
pub fn tape_denoiser<'a>(
    tape: &mut Tape<'a>,
    spec: &NetworkSpec,
    ids: &[NodeId],
    params: &ParamSet,
    x: NodeId,
    k: usize,
    cond_states: NodeId,
    cond_actions: NodeId,
) -> Result<NodeId, TensorError> {
    spec.validate()?;
    let IoSpec::Denoiser {
        cond_state_tokens,
        cond_action_tokens,
        modeled_tokens,
        modeled_role,
        ..
    } = spec.io
    else {
        return Err(TensorError::Invalid("not a denoiser spec".into()));
    };
    let mut c = Cursor { ids, names: params, i: 0 };
    let (tw, tb) = c.next2("proj_time.w", "proj_time.b");
    let state_proj = spec.uses_state_tokens().then(|| c.next2("proj_state.w", "proj_state.b"));
    let action_proj = spec.uses_action_tokens().then(|| c.next2("proj_action.w", "proj_action.b"));

    let k_emb = tape.leaf(time_embedding(k, spec.token_dim));
    let time_tok = linear(tape, k_emb, tw, tb)?;
    let mut groups = vec![time_tok];
    if cond_state_tokens > 0 {
        let (w, b) = state_proj.ok_or_else(|| TensorError::Invalid("missing state proj".into()))?;
        groups.push(linear(tape, cond_states, w, b)?);
    }
    if cond_action_tokens > 0 {
        let (w, b) =
            action_proj.ok_or_else(|| TensorError::Invalid("missing action proj".into()))?;
        groups.push(linear(tape, cond_actions, w, b)?);
    }
    let (mw, mb) = match modeled_role {
        TokenRole::State => state_proj.unwrap(),
        TokenRole::Action => action_proj.unwrap(),
    };
    groups.push(linear(tape, x, mw, mb)?);
    let tokens = tape.concat_rows(&groups)?;

    let total = tape.value(tokens).dims()[0];
    let trunk = transformer_trunk(tape, spec, &mut c, tokens, None)?;
    let modeled = tape.slice_rows(trunk, total - modeled_tokens, modeled_tokens)?;
    let (ow, ob) = c.next2("out.w", "out.b");
    linear(tape, modeled, ow, ob)
}

/// Regressor: readout token + state/action tokens -> `[1,1]` scalar.
pub fn tape_regressor<'a>(
    tape: &mut Tape<'a>,
    spec: &NetworkSpec,
    ids: &[NodeId],
    params: &ParamSet,
    states: NodeId,
    actions: NodeId,
) -> Result<NodeId, TensorError> {
    spec.validate()?;
    let IoSpec::Regressor { action_tokens, .. } = spec.io else {
        return Err(TensorError::Invalid("not a regressor spec".into()));
    };
    let mut c = Cursor { ids, names: params, i: 0 };
    let readout = c.next("readout");
    let (sw, sb) = c.next2("proj_state.w", "proj_state.b");
    let mut groups = vec![readout, linear(tape, states, sw, sb)?];
    if action_tokens > 0 {
        let (aw, ab) = c.next2("proj_action.w", "proj_action.b");
        groups.push(linear(tape, actions, aw, ab)?);
    }
    let tokens = tape.concat_rows(&groups)?;
    let trunk = transformer_trunk(tape, spec, &mut c, tokens, None)?;
    let head = tape.slice_rows(trunk, 0, 1)?;
    let (ow, ob) = c.next2("out.w", "out.b");
    linear(tape, head, ow, ob)
}

/// Causal transformer over interleaved state/action tokens. Returns
/// `(pred_actions, pred_states)`: row t of `pred_actions` is read above
/// state token t, row t of `pred_states` above action token t.
#[allow(clippy::too_many_arguments)]
pub fn tape_causal<'a>(
    tape: &mut Tape<'a>,
    spec: &NetworkSpec,
    ids: &[NodeId],
    params: &ParamSet,
    states: NodeId,
    actions: NodeId,
    mask: &Tensor,
) -> Result<(NodeId, NodeId), TensorError> {
    spec.validate()?;
    if !matches!(spec.io, IoSpec::Causal { .. }) {
        return Err(TensorError::Invalid("not a causal transformer spec".into()));
    }
    let mut c = Cursor { ids, names: params, i: 0 };
    let (sw, sb) = c.next2("proj_state.w", "proj_state.b");
    let (aw, ab) = c.next2("proj_action.w", "proj_action.b");
    let (eg, eb) = c.next2("ln_embed.g", "ln_embed.b");
    let s_tok = linear(tape, states, sw, sb)?;
    let a_tok = linear(tape, actions, aw, ab)?;
    let tokens = tape.interleave_rows(s_tok, a_tok)?;
    let tokens = tape.layer_norm(tokens, eg, eb)?;
    let trunk = transformer_trunk(tape, spec, &mut c, tokens, Some(mask))?;
    let above_states = tape.stride_rows(trunk, 0, 2)?;
    let above_actions = tape.stride_rows(trunk, 1, 2)?;
    let (oaw, oab) = c.next2("out_action.w", "out_action.b");
    let (osw, osb) = c.next2("out_state.w", "out_state.b");
    let pred_actions = linear(tape, above_states, oaw, oab)?;
    let pred_states = linear(tape, above_actions, osw, osb)?;
    Ok((pred_actions, pred_states))
}

fn linear<'a>(
    tape: &mut Tape<'a>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId, TensorError> {
    let z = tape.matmul(x, w)?;
    tape.add_bias(z, b)
}

/// Shared transformer trunk: positional features, pre-norm blocks, final
/// LayerNorm. Consumes `pos.w`, per-layer params, and `final_ln.*` from the
/// cursor.
fn transformer_trunk<'a>(
    tape: &mut Tape<'a>,
    spec: &NetworkSpec,
    c: &mut Cursor<'_>,
    tokens: NodeId,
    mask: Option<&Tensor>,
) -> Result<NodeId, TensorError> {
    let t = tape.value(tokens).dims()[0];
    let pos_w = c.next("pos.w");
    // Causal streams vary in length between training and rollout, so their
    // positional phases are anchored to the fixed attention window; the
    // other families always see a constant token count.
    let period = match spec.io {
        IoSpec::Causal { attn_window, .. } => attn_window.max(t),
        _ => t,
    };
    let feats = tape.leaf(fourier_features_period(t, spec.fourier_bases, period));
    let pos = tape.matmul(feats, pos_w)?;
    let mut x = tape.add(tokens, pos)?;

    let head_dim = spec.qkv_dim / spec.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    for l in 0..spec.layers {
        let pre = format!("layer{l}");
        let (g1, b1) = c.next2(&format!("{pre}.ln1.g"), &format!("{pre}.ln1.b"));
        let xn = tape.layer_norm(x, g1, b1)?;
        let (wq, bq) = c.next2(&format!("{pre}.attn.q.w"), &format!("{pre}.attn.q.b"));
        let (wk, bk) = c.next2(&format!("{pre}.attn.k.w"), &format!("{pre}.attn.k.b"));
        let (wv, bv) = c.next2(&format!("{pre}.attn.v.w"), &format!("{pre}.attn.v.b"));
        let (wo, bo) = c.next2(&format!("{pre}.attn.o.w"), &format!("{pre}.attn.o.b"));
        let q = linear(tape, xn, wq, bq)?;
        let k = linear(tape, xn, wk, bk)?;
        let v = linear(tape, xn, wv, bv)?;
        let mut heads = Vec::with_capacity(spec.heads);
        for hh in 0..spec.heads {
            let qh = tape.slice_cols(q, hh * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, hh * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, hh * head_dim, head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores, mask)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let attn_out = linear(tape, cat, wo, bo)?;
        x = tape.add(x, attn_out)?;

        let (g2, b2) = c.next2(&format!("{pre}.ln2.g"), &format!("{pre}.ln2.b"));
        let xn2 = tape.layer_norm(x, g2, b2)?;
        let (w1, bb1) = c.next2(&format!("{pre}.mlp.fc1.w"), &format!("{pre}.mlp.fc1.b"));
        let (w2, bb2) = c.next2(&format!("{pre}.mlp.fc2.w"), &format!("{pre}.mlp.fc2.b"));
        let hmid = linear(tape, xn2, w1, bb1)?;
        let hact = tape.gelu(hmid);
        let ff = linear(tape, hact, w2, bb2)?;
        x = tape.add(x, ff)?;
    }
    let (fg, fb) = c.next2("final_ln.g", "final_ln.b");
    tape.layer_norm(x, fg, fb)
}

/// Fourier positional features: for basis b, `sin(2^b pi i / T)` and
/// `cos(2^b pi i / T)` per position i. Shape `[T, 2*bases]`.
pub fn fourier_features(tokens: usize, bases: usize) -> Tensor {
    fourier_features_period(tokens, bases, tokens)
}

/// [`fourier_features`] with the phase denominator decoupled from the token
/// count, so positions keep stable features across context lengths.
pub fn fourier_features_period(tokens: usize, bases: usize, period: usize) -> Tensor {
    let mut values = Vec::with_capacity(tokens * 2 * bases);
    for i in 0..tokens {
        for b in 0..bases {
            let phase = (1u64 << b) as f64 * std::f64::consts::PI * i as f64 / period as f64;
            values.push(phase.sin());
            values.push(phase.cos());
        }
    }
    Tensor::from_raw(vec![tokens, 2 * bases], values)
}

/// Sinusoidal embedding of the diffusion step index, shape `[1, dim]`.
pub fn time_embedding(k: usize, dim: usize) -> Tensor {
    let mut values = Vec::with_capacity(dim);
    let half = dim / 2;
    for i in 0..half {
        let omega = (10_000.0f64).powf(-(2.0 * i as f64) / dim as f64);
        values.push((k as f64 * omega).sin());
        values.push((k as f64 * omega).cos());
    }
    Tensor::from_raw(vec![1, dim], values)
}
