//! Flow-matching sandbox on Gaussian random fields with test-time
//! calibration of the conditioning noise level.
//!
//! The core is generic over [`Real`]; `*64`/`*32` aliases fix the scalar.

// `!(a < b)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod diagnostics;
mod error;
pub mod grid;
pub mod model;
pub mod rng;
pub mod sampler;
mod scalar;
pub mod schedule;

pub use calibrate::{
    calibrate_schedule, calibrate_step, coarse_to_fine, one_step_reverse_loss, CalibrationTable, ReverseStepObjective,
    SearchConfig, StepSearch,
};
pub use diagnostics::{
    eval_generation, gaussian_frechet, gaussian_stats, reverse_mse_curve, ssim, ssim_noise_curve, Curve, GaussianStats,
    GenerationReport,
};
pub use error::{Error, Result};
pub use grid::{grf_sample, DataSpec, Field};
pub use model::{fit_spectrum, wiener_gain, Denoiser, DenoiserKind, ParamsFile, WienerParams};
pub use rng::Seed;
pub use sampler::{add_noise, euler_step, sample, sample_batch};
pub use scalar::Real;
pub use schedule::{ScheduleKind, SigmaSchedule};

pub type Field64 = Field<f64>;
pub type Field32 = Field<f32>;
pub type Denoiser64 = Denoiser<f64>;
pub type Denoiser32 = Denoiser<f32>;
pub type Schedule64 = SigmaSchedule<f64>;
pub type Schedule32 = SigmaSchedule<f32>;
pub type Table64 = CalibrationTable<f64>;
pub type Table32 = CalibrationTable<f32>;
pub type DataSpec64 = DataSpec<f64>;
pub type DataSpec32 = DataSpec<f32>;
