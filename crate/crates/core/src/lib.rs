//! Mask-free shadow removal at desk scale.
//!
//! A two-branch Shadow Removal network (ConvNext U-Net + DWT-FFC frequency
//! branch), a Fourier-attention transformer refiner, the composite training
//! loss, the two-stage optimization recipe, synthetic paired data, and the
//! PSNR/SSIM evaluation harness - all on CPU, with a self-check suite that
//! verifies every transform and gradient against independent oracles.

// Tape ops allocate and free large tensors constantly; the system
// allocator's mmap threshold turns that into page-fault churn.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod archive;
pub mod config;
pub mod data;
pub mod error;
pub mod fft;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refiner;
pub mod removal;
pub mod rng;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use config::{Config, FfaVariant, LossWeights, ModelConfig, SsimMode, StageSchedule};
pub use error::{Error, Result};
pub use rng::RunSeed;
pub use tensor::{ImageBatch, Real, Shape, Tensor};
