//! Shared plumbing for conditional denoisers: the per-sample DSM loss used
//! during training and conditional DDIM sampling at inference.

use super::ModelError;
use crate::diffusion::{ddim_from_noise, draw_step, gaussian, q_sample, DiffusionSchedule, SampleBounds};
use crate::tensor::{
    denoiser_forward, tape_denoiser, NetworkSpec, NodeId, ParamSet, Tape, Tensor,
};
use rand_chacha::ChaCha8Rng;

/// Builds the denoising-score-matching loss for one window on a tape:
/// sum over the modeled block of ‖ε − ε̂(x_k, k, cond)‖².
#[allow(clippy::too_many_arguments)]
pub(crate) fn dsm_loss_one<'a>(
    tape: &mut Tape<'a>,
    spec: &NetworkSpec,
    ids: &[NodeId],
    params: &'a ParamSet,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    cond_states: Tensor,
    cond_actions: Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, ModelError> {
    let k = draw_step(schedule, rng);
    let eps = gaussian(x0.dims(), rng);
    let x_k = q_sample(x0, schedule.alpha_bar(k), &eps);
    let x_id = tape.leaf(x_k);
    let cs = tape.leaf(cond_states);
    let ca = tape.leaf(cond_actions);
    let pred = tape_denoiser(tape, spec, ids, params, x_id, k, cs, ca)?;
    let target = tape.leaf(eps);
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.sum_all(sq))
}

/// Draws one conditional DDIM sample of the modeled block.
pub(crate) fn sample_block(
    spec: &NetworkSpec,
    params: &ParamSet,
    schedule: &DiffusionSchedule,
    rows: usize,
    cols: usize,
    cond_states: &Tensor,
    cond_actions: &Tensor,
    bounds: &SampleBounds,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, ModelError> {
    let x_k = gaussian(&[rows, cols], rng);
    let out = ddim_from_noise(schedule, x_k, Some(bounds), |x, k| {
        denoiser_forward(spec, params, x, k, cond_states, cond_actions)
    })?;
    if out.has_non_finite() {
        return Err(ModelError::NonFinite("diffusion sample".into()));
    }
    Ok(out)
}
