//! Tractable Gaussian Schrödinger bridge for paired signal enhancement, with
//! adversarial few-step training.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: VE noise schedule and closed-form bridge coefficients.
//! - [`bridge`]: marginal/transition sampling, the bridge posterior, reverse
//!   samplers and the few-step inference loop.
//! - [`autodiff`]: a small tape-based reverse-mode engine, AdamW, EMA and the
//!   checkpoint container.
//! - [`signal`]: STFT, compression, mel filters, synthetic data and file I/O.
//! - [`nets`]: generator and discriminator networks.
//! - [`train`]: losses, data sources, the training step and inference model.
//! - [`metrics`]: SI-SDR, LSD and the step × SNR sweep.
//! - [`config`]: the TOML experiment configuration.

pub mod autodiff;
pub mod bridge;
pub mod config;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod schedule;
pub mod signal;
pub mod train;
pub mod verify;

pub use autodiff::Tensor;
pub use config::ExperimentConfig;
pub use bridge::{BridgeState, Denoiser, PosteriorParams, SamplerMode};
pub use error::{Error, Result};
pub use schedule::{BridgeCoefficients, ScheduleParams, TransitionParams};
pub use signal::{PairedSample, StftConfig, Task};
