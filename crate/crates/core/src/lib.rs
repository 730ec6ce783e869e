//! Adversarial purification with a hierarchical vector-quantized U-shaped
//! denoiser.
//!
//! * [`tensor`]: f64 tensors, convolution kernels, reverse-mode differentiation
//!   and the adaptive-moment optimizer.
//! * [`vq`]: per-depth codebooks, nearest-code lookup and the straight-through
//!   quantizer with its encoder and codebook losses.
//! * [`model`]: the purifier, its three-term training loss, training and
//!   checkpoints.
//! * [`classifier`]: the small residual CNN being defended.
//! * [`attack`]: FGSM, BIM and PGD under an l-infinity budget.
//! * [`harness`]: datasets, the end-to-end pipeline, diagnostics and reports.

pub mod attack;
pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod harness;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod vq;

pub use attack::{AttackConfig, AttackFamily};
pub use classifier::{Classifier, ClassifierConfig};
pub use error::{Error, Result};
pub use harness::{Dataset, EvalReport, RunConfig};
pub use model::{LossBreakdown, TrainingLog, VqUnet, VqUnetConfig};
pub use tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};
pub use vq::{Codebook, QuantizationResult};
