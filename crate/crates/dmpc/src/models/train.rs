//! Shared optimization drivers.
//!
//! Two loops cover every model: `train_batched` runs one tape per step with
//! the whole minibatch inside (plain MLPs), while `train_accumulated` runs
//! one tape per sample and averages gradients (transformers, whose attention
//! operates over token rows and cannot batch across windows in one tape).

use super::ModelError;
use crate::tensor::{
    bind_params, clip_global_norm, AdamParams, Gradients, NetworkSpec, NodeId, Optimizer,
    ParamSet, Tape, Tensor, TrainSchedule,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Optimization steps.
    pub steps: usize,
    /// Minibatch size.
    pub batch: usize,
    /// Learning-rate schedule.
    pub schedule: TrainSchedule,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// EMA decay for the evaluation weights.
    pub ema_decay: f64,
    /// Seed for init, batching, and noise draws.
    pub seed: u64,
}

impl TrainConfig {
    /// The standard recipe: linear warmup to 1e-4 over 500 steps, cosine to
    /// 1e-5, clip 5, EMA 0.99.
    pub fn standard(steps: usize, batch: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch,
            schedule: TrainSchedule::standard(steps),
            clip: 5.0,
            ema_decay: 0.99,
            seed,
        }
    }
}

/// Output of a training run: EMA weights for evaluation, the last raw
/// checkpoint, and the mean loss over the final 10% of steps.
#[derive(Debug, Clone)]
pub struct TrainedNet {
    /// EMA parameters (the default evaluation weights).
    pub ema: ParamSet,
    /// Raw parameters after the final step.
    pub last: ParamSet,
    /// Mean training loss near the end of the run.
    pub final_loss: f64,
}

fn finish(losses: &[f64], ema: ParamSet, last: ParamSet) -> TrainedNet {
    let tail = (losses.len() / 10).max(1).min(losses.len());
    let final_loss = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
    TrainedNet { ema, last, final_loss }
}

/// One tape per step; the builder assembles the whole minibatch loss.
pub fn train_batched<F>(
    spec: &NetworkSpec,
    config: &TrainConfig,
    build: F,
) -> Result<TrainedNet, ModelError>
where
    F: for<'a> FnMut(
        &mut Tape<'a>,
        &[NodeId],
        &'a ParamSet,
        &mut ChaCha8Rng,
    ) -> Result<NodeId, ModelError>,
{
    train_batched_init(config, spec.init_params(config.seed)?, build)
}

/// [`train_batched`] starting from existing parameters (fine-tuning).
pub fn train_batched_init<F>(
    config: &TrainConfig,
    mut params: ParamSet,
    mut build: F,
) -> Result<TrainedNet, ModelError>
where
    F: for<'a> FnMut(
        &mut Tape<'a>,
        &[NodeId],
        &'a ParamSet,
        &mut ChaCha8Rng,
    ) -> Result<NodeId, ModelError>,
{
    let mut opt =
        Optimizer::new(&params, config.schedule.clone(), AdamParams::default(), config.ema_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut grads_vec;
        {
            let mut tape = Tape::new();
            let ids = bind_params(&mut tape, &params);
            let loss = build(&mut tape, &ids, &params, &mut rng)?;
            losses.push(tape.value(loss).item());
            let mut grads = tape.backward(loss)?;
            grads_vec = collect_grads(&ids, &params, &mut grads);
        }
        clip_global_norm(&mut grads_vec, config.clip)?;
        opt.step(&mut params, &grads_vec)?;
    }
    let ema = opt.ema().clone();
    Ok(finish(&losses, ema, params))
}

/// One tape per sample; gradients are averaged over the minibatch.
pub fn train_accumulated<F>(
    spec: &NetworkSpec,
    config: &TrainConfig,
    build_one: F,
) -> Result<TrainedNet, ModelError>
where
    F: for<'a> FnMut(
        &mut Tape<'a>,
        &[NodeId],
        &'a ParamSet,
        &mut ChaCha8Rng,
    ) -> Result<NodeId, ModelError>,
{
    train_accumulated_init(config, spec.init_params(config.seed)?, build_one)
}

/// [`train_accumulated`] starting from existing parameters (fine-tuning).
pub fn train_accumulated_init<F>(
    config: &TrainConfig,
    mut params: ParamSet,
    mut build_one: F,
) -> Result<TrainedNet, ModelError>
where
    F: for<'a> FnMut(
        &mut Tape<'a>,
        &[NodeId],
        &'a ParamSet,
        &mut ChaCha8Rng,
    ) -> Result<NodeId, ModelError>,
{
    let mut opt =
        Optimizer::new(&params, config.schedule.clone(), AdamParams::default(), config.ema_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let mut losses = Vec::with_capacity(config.steps);
    let scale = 1.0 / config.batch as f64;
    for _ in 0..config.steps {
        let mut acc: Vec<Tensor> =
            (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).dims())).collect();
        let mut step_loss = 0.0;
        for _ in 0..config.batch {
            let mut tape = Tape::new();
            let ids = bind_params(&mut tape, &params);
            let loss = build_one(&mut tape, &ids, &params, &mut rng)?;
            step_loss += tape.value(loss).item() * scale;
            let mut grads = tape.backward(loss)?;
            for (i, id) in ids.iter().enumerate() {
                if let Some(g) = grads.take(*id) {
                    let dst = acc[i].values_mut();
                    for (d, s) in dst.iter_mut().zip(g.values()) {
                        *d += s * scale;
                    }
                }
            }
        }
        losses.push(step_loss);
        clip_global_norm(&mut acc, config.clip)?;
        opt.step(&mut params, &acc)?;
    }
    let ema = opt.ema().clone();
    Ok(finish(&losses, ema, params))
}

fn collect_grads(ids: &[NodeId], params: &ParamSet, grads: &mut Gradients) -> Vec<Tensor> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            grads.take(*id).unwrap_or_else(|| Tensor::zeros(params.tensor(i).dims()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::IoSpec;

    fn mlp_spec() -> NetworkSpec {
        NetworkSpec {
            layers: 2,
            token_dim: 2,
            heads: 1,
            qkv_dim: 1,
            hidden_dim: 32,
            fourier_bases: 1,
            io: IoSpec::Mlp { input_dim: 1, output_dim: 1 },
        }
    }

    #[test]
    fn batched_driver_fits_a_line() {
        // y = 3x − 1 on x ∈ [−1, 1].
        let spec = mlp_spec();
        let config = TrainConfig {
            steps: 600,
            batch: 64,
            schedule: TrainSchedule {
                warmup_steps: 50,
                peak_lr: 5e-3,
                final_lr: 5e-4,
                total_steps: 600,
            },
            clip: 5.0,
            ema_decay: 0.99,
            seed: 3,
        };
        let trained = train_batched(&spec, &config, |tape, ids, params, rng| {
            use rand::Rng;
            let b = 64;
            let xs: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
            let x = tape.leaf(Tensor::matrix(b, 1, xs)?);
            let pred = crate::tensor::tape_mlp(tape, &mlp_spec(), ids, params, x)?;
            let target = tape.leaf(Tensor::matrix(b, 1, ys)?);
            let diff = tape.sub(pred, target)?;
            let sq = tape.square(diff);
            Ok(tape.mean_all(sq))
        })
        .unwrap();
        assert!(trained.final_loss < 1e-3, "final loss {}", trained.final_loss);
        let out = crate::tensor::mlp_forward(&spec, &trained.ema, &Tensor::matrix(1, 1, vec![0.5]).unwrap())
            .unwrap();
        assert!((out.values()[0] - 0.5).abs() < 0.1, "f(0.5) = {}", out.values()[0]);
    }

    #[test]
    fn accumulated_driver_matches_target_mean() {
        // Constant target 2: the net bias should absorb it.
        let spec = mlp_spec();
        let config = TrainConfig {
            steps: 300,
            batch: 8,
            schedule: TrainSchedule {
                warmup_steps: 20,
                peak_lr: 1e-2,
                final_lr: 1e-3,
                total_steps: 300,
            },
            clip: 5.0,
            ema_decay: 0.99,
            seed: 4,
        };
        let trained = train_accumulated(&spec, &config, |tape, ids, params, rng| {
            use rand::Rng;
            let x = tape.leaf(Tensor::matrix(1, 1, vec![rng.gen_range(-1.0..1.0)])?);
            let pred = crate::tensor::tape_mlp(tape, &mlp_spec(), ids, params, x)?;
            let target = tape.leaf(Tensor::matrix(1, 1, vec![2.0])?);
            let diff = tape.sub(pred, target)?;
            let sq = tape.square(diff);
            Ok(tape.mean_all(sq))
        })
        .unwrap();
        assert!(trained.final_loss < 1e-2, "final loss {}", trained.final_loss);
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = mlp_spec();
        let config = TrainConfig::standard(50, 4, 9);
        let run = || {
            train_batched(&spec, &config, |tape, ids, params, rng| {
                use rand::Rng;
                let x = tape.leaf(Tensor::matrix(2, 1, vec![rng.gen_range(-1.0..1.0), 0.5])?);
                let pred = crate::tensor::tape_mlp(tape, &mlp_spec(), ids, params, x)?;
                let sq = tape.square(pred);
                Ok(tape.mean_all(sq))
            })
            .unwrap()
        };
        let a = run();
        let b = run();
        for i in 0..a.ema.len() {
            assert_eq!(a.ema.tensor(i).values(), b.ema.tensor(i).values());
        }
    }
}
