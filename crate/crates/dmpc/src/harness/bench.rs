//! Wall-clock planning time per environment step: each agent is run in
//! closed loop and the duration of every `act` call is recorded; the first
//! few calls are excluded as warmup.

use super::HarnessError;
use crate::envs::{reset, step, EnvSpec};
use crate::planners::Agent;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Timing samples excluded from the head of each benchmark.
pub const WARMUP_STEPS: usize = 5;

/// Per-agent planning latency.
#[derive(Debug, Clone)]
pub struct TimingResult {
    /// Agent label as reported.
    pub label: String,
    /// Mean milliseconds per planning call.
    pub mean_ms: f64,
    /// Standard error of the mean, ms.
    pub stderr_ms: f64,
    /// Timed calls (warmup excluded).
    pub steps: usize,
}

/// Times `steps` planning calls (after [`WARMUP_STEPS`] untimed ones) in a
/// closed env loop, restarting episodes as they end.
pub fn bench_timing(
    label: &str,
    agent: &mut dyn Agent,
    spec: &EnvSpec,
    steps: usize,
    seed: u64,
) -> Result<TimingResult, HarnessError> {
    if steps < 2 {
        return Err(HarnessError::Invalid("bench needs at least 2 timed steps".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut env = reset(spec, master.gen());
    agent.reset();
    let mut samples = Vec::with_capacity(steps);
    let mut calls = 0usize;
    while samples.len() < steps {
        if env.terminated {
            env = reset(spec, master.gen());
            agent.reset();
        }
        let start = Instant::now();
        let action = agent.act(&env.state, &mut rng)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        calls += 1;
        if calls > WARMUP_STEPS {
            samples.push(elapsed);
        }
        env = step(spec, &env, &spec.clip_action(&action))?.state;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(TimingResult {
        label: label.to_string(),
        mean_ms: mean,
        stderr_ms: (var / n).sqrt(),
        steps: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planners::PlannerError;

    /// Burns a known amount of time per call and counts invocations.
    struct SleepAgent {
        calls: usize,
        slow_warmup: bool,
    }

    impl Agent for SleepAgent {
        fn act(&mut self, _s: &[f64], _r: &mut ChaCha8Rng) -> Result<Vec<f64>, PlannerError> {
            self.calls += 1;
            let ms = if self.slow_warmup && self.calls <= WARMUP_STEPS { 40 } else { 2 };
            std::thread::sleep(std::time::Duration::from_millis(ms));
            Ok(vec![0.0, 0.0])
        }
    }

    #[test]
    fn warmup_calls_are_excluded_from_the_mean() {
        let spec = EnvSpec::pointmass2d();
        let mut agent = SleepAgent { calls: 0, slow_warmup: true };
        let result = bench_timing("sleep", &mut agent, &spec, 10, 3).unwrap();
        assert_eq!(result.steps, 10);
        assert_eq!(agent.calls, 10 + WARMUP_STEPS);
        // Warmup calls took 40ms each; timed calls 2ms. A mean anywhere
        // near 40ms means warmup leaked into the samples.
        assert!(
            result.mean_ms < 20.0,
            "mean {}ms should reflect only the 2ms timed calls",
            result.mean_ms
        );
        assert!(result.mean_ms >= 2.0);
        assert!(result.stderr_ms >= 0.0);
    }

    #[test]
    fn stderr_shrinks_with_sample_count_scale() {
        // stderr = std/√n by construction; cross-check against a manual
        // computation on fabricated samples.
        let samples = [2.0, 4.0, 6.0, 8.0];
        let mean: f64 = samples.iter().sum::<f64>() / 4.0;
        let var = samples.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 3.0;
        let stderr = (var / 4.0).sqrt();
        assert!((mean - 5.0).abs() < 1e-12);
        assert!((stderr - (20.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
    }
}
