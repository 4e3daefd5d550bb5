//! Optimization, metrics, checkpoints and verification tooling.

pub mod checkpoint;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, Scope};
pub use metrics::{psnr, ssim, ssim_value};
pub use optim::{Adam, OptimConfig};
pub use trainer::{baseline_psnr, derain_image, evaluate, ImageMetrics, LossRecord, TrainConfig, Trainer};
