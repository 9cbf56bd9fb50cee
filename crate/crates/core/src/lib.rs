//! Two-stage decision-sampling process over a three-logit policy.
//!
//! A policy samples candidate answers (`θ_s`) and decides whether to stop or
//! resample after each one (`θ_{d,C}`, `θ_{d,W}`). The crate computes the
//! per-track gradients of surrogate-reward, token-level KL, SFT and DFT
//! objectives, measures how each splits between the sampling and decision
//! logits, runs GRPO-style training on the toy policy, and fits the
//! three-parameter accuracy model to trajectory records.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`); the `f64` aliases
//! below are what the CLI and most callers use.

pub mod attribution;
pub mod calibration;
pub mod config;
pub mod error;
pub mod exact;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Real;

pub use attribution::{attribute, attribution_sweep, AttributionReport, SweepRow};
pub use calibration::{predict_accuracy, CalibrationParams, TruncationConvention};
pub use objectives::{ObjectiveGradient, Track};
pub use policy::{sigmoid, ActionProbs, KlSignConvention, ParamVec, PolicyParams, WorldConfig};
pub use trajectory::{AttemptOutcome, DecisionAction, GroupSample, Step, Trajectory};

pub type Params = PolicyParams<f64>;
pub type World = WorldConfig<f64>;
pub type Gradient = ObjectiveGradient<f64>;
pub type TrainSettings = trainer::TrainConfig<f64>;
pub type Trace = trainer::TrainingTrace<f64>;
pub type Report = AttributionReport<f64>;

pub type Params32 = PolicyParams<f32>;
pub type World32 = WorldConfig<f32>;
pub type Gradient32 = ObjectiveGradient<f32>;
