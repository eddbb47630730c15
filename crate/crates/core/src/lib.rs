//! Gaussian diffusion probabilistic models, cold diffusion and observer-based
//! novelty metrics, at a scale where every formula can be checked against an
//! independent numerical oracle.

pub mod error;
pub mod cli_harness;
pub mod cold_diffusion;
pub mod datasets;
pub mod denoiser_net;
pub mod forward_process;
pub mod gaussian_analytics;
pub mod latent_conditioning;
pub mod novelty_metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::NoiseRng;
pub use schedule::{Schedule, SigmaMode};
pub use tensor::Tensor;
