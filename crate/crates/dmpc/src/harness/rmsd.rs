//! Compounding-error study: teacher-forced rollouts of a dynamics model
//! against held-out trajectories, aggregated as median RMSD per horizon
//! with 10/90 percentile bands.
//!
//! Actions are teacher-forced from the dataset (the only reading consistent
//! with sampling "state action sequences"); states are the model's own
//! predictions, so error compounds along the rollout. Multi-step models are
//! chained block-by-block: each block is conditioned on the previous
//! block's final predicted state, and a partial tail block is padded by
//! repeating the last action, then truncated.

use super::HarnessError;
use crate::data::Dataset;
use crate::exec::par_map;
use crate::models::{DynamicsKind, DynamicsModel, ModelError, Preset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Median and percentile bands of rollout RMSD per horizon.
#[derive(Debug, Clone)]
pub struct RmsdCurve {
    /// Horizon lengths 1..=max, strictly increasing.
    pub horizons: Vec<usize>,
    /// Median RMSD at each horizon.
    pub median: Vec<f64>,
    /// 10th percentile at each horizon.
    pub p10: Vec<f64>,
    /// 90th percentile at each horizon.
    pub p90: Vec<f64>,
    /// Windows that contributed.
    pub samples: usize,
    /// Draws rejected because the horizon ran past the trajectory end.
    pub skipped: usize,
}

impl RmsdCurve {
    /// Checks the structural invariants: horizons strictly increasing and
    /// percentile bands bracketing the median.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Invalid("rmsd horizons must increase".into()));
        }
        let n = self.horizons.len();
        if self.median.len() != n || self.p10.len() != n || self.p90.len() != n {
            return Err(HarnessError::Invalid("rmsd curve arrays disagree in length".into()));
        }
        for i in 0..n {
            if !(self.p10[i] <= self.median[i] && self.median[i] <= self.p90[i]) {
                return Err(HarnessError::Invalid(format!(
                    "rmsd percentiles do not bracket the median at horizon {}",
                    self.horizons[i]
                )));
            }
        }
        Ok(())
    }
}

/// Study defaults per preset: (samples, max horizon).
pub fn rmsd_defaults(preset: Preset) -> (usize, usize) {
    match preset {
        Preset::Desk => (256, 64),
        Preset::Paper => (1024, 256),
    }
}

/// RMSD over the non-velocity coordinates at each horizon: entry `h − 1`
/// compares `pred[h − 1]` against `truth[h − 1]`.
pub fn rmsd_per_horizon(
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    velocity_mask: &[bool],
) -> Vec<f64> {
    let coords: Vec<usize> =
        (0..velocity_mask.len()).filter(|&c| !velocity_mask[c]).collect();
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            let ss: f64 = coords.iter().map(|&c| (p[c] - t[c]).powi(2)).sum();
            (ss / coords.len() as f64).sqrt()
        })
        .collect()
}

/// Linear-interpolation percentile of already-sorted values, q ∈ [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let pos = q * (m - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Rolls the model for `len` steps under teacher-forced actions, chaining
/// multi-step models block-by-block.
fn chained_rollout(
    model: &DynamicsModel,
    state: &[f64],
    actions: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, ModelError> {
    if model.kind != DynamicsKind::MsDiff {
        return model.rollout(state, actions, rng);
    }
    let f = model.horizon;
    let mut preds: Vec<Vec<f64>> = Vec::with_capacity(actions.len());
    let mut s = state.to_vec();
    let mut i = 0;
    while i < actions.len() {
        let take = (actions.len() - i).min(f);
        let mut block = actions[i..i + take].to_vec();
        while block.len() < f {
            block.push(block.last().expect("take ≥ 1").clone());
        }
        let out = model.rollout(&s, &block, rng)?;
        preds.extend_from_slice(&out[..take]);
        s = preds.last().expect("take ≥ 1").clone();
        i += take;
    }
    Ok(preds)
}

/// Runs the compounding-error study: draws `samples` (episode, start) windows
/// uniformly with seeded randomness, teacher-forces the dataset's actions
/// through the model, and aggregates RMSD over the non-velocity coordinates.
/// Draws whose window runs past the trajectory end are skipped and counted.
pub fn rmsd_study(
    model: &DynamicsModel,
    dataset: &Dataset,
    max_horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<RmsdCurve, HarnessError> {
    if max_horizon == 0 || samples == 0 {
        return Err(HarnessError::Invalid("rmsd study needs horizon ≥ 1 and samples ≥ 1".into()));
    }
    if dataset.episodes.is_empty() {
        return Err(HarnessError::Invalid("rmsd study needs a non-empty dataset".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks: Vec<(usize, usize, u64)> = Vec::new();
    let mut skipped = 0usize;
    for _ in 0..samples {
        let ep = master.gen_range(0..dataset.episodes.len());
        let len = dataset.episodes[ep].len();
        let t = master.gen_range(0..len);
        let rollout_seed = master.gen::<u64>();
        // Truth for horizon h is s_{t+h}; the deepest lookup must stay
        // within the stored states s_0..s_{len−1}.
        if t + max_horizon > len - 1 {
            skipped += 1;
            continue;
        }
        tasks.push((ep, t, rollout_seed));
    }
    if tasks.is_empty() {
        return Err(HarnessError::Invalid(format!(
            "all {samples} draws were skipped: episodes are shorter than horizon {max_horizon}"
        )));
    }

    let mask = crate::envs::EnvSpec::for_name(dataset.env).velocity_mask;
    let curves: Vec<Result<Vec<f64>, ModelError>> = par_map(tasks.len(), |i| {
        let (ep, t, rollout_seed) = tasks[i];
        let traj = &dataset.episodes[ep];
        let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed);
        let actions = &traj.actions[t..t + max_horizon];
        let preds = chained_rollout(model, &traj.states[t], actions, &mut rng)?;
        let truth = &traj.states[t + 1..t + 1 + max_horizon];
        Ok(rmsd_per_horizon(&preds, truth, &mask))
    });

    let mut per_sample = Vec::with_capacity(curves.len());
    for c in curves {
        per_sample.push(c.map_err(HarnessError::Model)?);
    }

    let horizons: Vec<usize> = (1..=max_horizon).collect();
    let mut median = Vec::with_capacity(max_horizon);
    let mut p10 = Vec::with_capacity(max_horizon);
    let mut p90 = Vec::with_capacity(max_horizon);
    for h in 0..max_horizon {
        let mut vals: Vec<f64> = per_sample.iter().map(|c| c[h]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("rmsd values are finite"));
        median.push(percentile(&vals, 0.5));
        p10.push(percentile(&vals, 0.1));
        p90.push(percentile(&vals, 0.9));
    }
    let curve =
        RmsdCurve { horizons, median, p10, p90, samples: per_sample.len(), skipped };
    curve.validate()?;
    Ok(curve)
}
