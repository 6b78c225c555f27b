//! Training machinery: warmup/cosine learning-rate schedule, global-norm
//! gradient clipping, and Adam with an exponential-moving-average shadow of
//! the parameters (evaluation always reads the EMA copy).

use super::net::ParamSet;
use super::{Tensor, TensorError};

/// Linear warmup to `peak_lr`, then cosine decay to `final_lr` at
/// `total_steps`. Steps past the end keep `final_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub total_steps: usize,
}

impl TrainSchedule {
    /// Standard recipe: 500-step warmup to 1e-4, cosine down to 1e-5.
    pub fn standard(total_steps: usize) -> Self {
        Self { warmup_steps: 500, peak_lr: 1e-4, final_lr: 1e-5, total_steps }
    }

    /// Learning rate at a zero-based step index.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.final_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.final_lr
            + (self.peak_lr - self.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales all gradients down so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64, TensorError> {
    let mut sq = 0.0;
    for g in grads.iter() {
        for (i, v) in g.values().iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite { index: i });
            }
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.values_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// Adam moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam optimizer state plus the EMA parameter shadow.
pub struct Optimizer {
    adam: AdamParams,
    schedule: TrainSchedule,
    ema_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    ema: ParamSet,
    step: usize,
}

impl Optimizer {
    /// Initializes moments at zero and the EMA shadow at the current
    /// parameter values.
    pub fn new(
        params: &ParamSet,
        schedule: TrainSchedule,
        adam: AdamParams,
        ema_decay: f64,
    ) -> Self {
        let m = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).dims())).collect();
        let v = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).dims())).collect();
        Self { adam, schedule, ema_decay, m, v, ema: params.clone(), step: 0 }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// EMA shadow of the parameters; evaluation should read this.
    pub fn ema(&self) -> &ParamSet {
        &self.ema
    }

    /// One Adam update with bias correction, then an EMA refresh. `grads`
    /// must align with the parameter order. Returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<f64, TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::Invalid(format!(
                "got {} gradients for {} parameter tensors",
                grads.len(),
                params.len()
            )));
        }
        let lr = self.schedule.lr(self.step);
        let t = (self.step + 1) as i32;
        let AdamParams { beta1, beta2, eps } = self.adam;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            if grads[i].dims() != params.tensor(i).dims() {
                return Err(TensorError::Invalid(format!(
                    "gradient {} shape {:?} does not match parameter {:?}",
                    params.name(i),
                    grads[i].dims(),
                    params.tensor(i).dims()
                )));
            }
            let g = grads[i].values();
            let m = self.m[i].values_mut();
            let v = self.v[i].values_mut();
            let p = params.tensor_mut(i).values_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            let e = self.ema.tensor_mut(i).values_mut();
            let p = params.tensor(i).values();
            for j in 0..p.len() {
                e[j] = self.ema_decay * e[j] + (1.0 - self.ema_decay) * p[j];
            }
        }
        self.step += 1;
        Ok(lr)
    }
}
