//! Diffusion model predictive control (D-MPC) on toy continuous-control tasks.
//!
//! The crate trains offline models of behaviour (action proposals), dynamics,
//! and returns (objective), then plans by sampling multi-step action
//! candidates, rolling them through the dynamics model, scoring them, and
//! executing the best one. Everything runs on CPU with `f64` math and seeded
//! RNG streams so results are reproducible bit-for-bit.
//!
//! Module map:
//! - [`tensor`]: dense tensors, reverse-mode autodiff, the four network
//!   architectures, Adam/EMA optimisation, and the checkpoint container.
//! - [`envs`]: point-mass and pendulum environments plus the actuator-defect
//!   wrapper.
//! - [`data`]: offline dataset generation, CSV persistence, per-coordinate
//!   empirical-CDF normalization, and training-window extraction.
//! - [`diffusion`]: cosine noise schedule, forward noising, denoising
//!   score-matching steps, and DDIM sampling.
//! - [`models`]: proposal / dynamics / objective model kinds built on the
//!   two layers above, plus the MBOP model set.
//! - [`planners`]: sample-score-rank planning, MBOP-TrajOpt, and the MPC
//!   episode loop.
//! - [`adapt`]: play-data collection, dynamics-only fine-tuning, and policy
//!   distillation.
//! - [`harness`]: experiment configs, rollout-error studies, normalized
//!   scores, timing, and CSV/SVG reports.

pub mod adapt;
pub mod data;
pub mod diffusion;
pub mod envs;
pub mod exec;
pub mod harness;
pub mod models;
pub mod planners;
pub mod tensor;
