//! Unsupervised multi-scale GAN super-resolution for 3D perfusion volumes.
//!
//! A pyramid of generator/critic pairs is trained on a single low-resolution
//! volume, coarse to fine, with a co-registered anatomical volume as a second
//! generator input. The finest generator then refines an interpolated
//! version of the input on any target grid.
//!
//! Modules, bottom up:
//! - [`volume`]: data model, normalization, resampling, NIfTI / raw I/O
//! - [`pyramid`]: scale planning and the aligned training pyramid
//! - [`nn`]: 3D U-Net generator, patch critic, autodiff, checkpoints
//! - [`losses`]: WGAN-GP critic objective, MSE and Gaussian low-pass terms
//! - [`trainer`]: progressive per-scale adversarial training
//! - [`superres`]: single-pass generation on an arbitrary grid
//! - [`metrics`]: PSNR, 3D SSIM, interpolation baselines, comparison reports
//! - [`phantom`]: synthetic paired volumes for desk-scale experiments

pub mod error;
pub mod filter;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pyramid;
pub mod superres;
pub mod trainer;
pub mod volume;

pub use error::{Error, ErrorCategory, Result};
pub use losses::{GaussianFilterSpec, LossWeights};
pub use metrics::{MetricsOptions, MetricsReport};
pub use nn::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ParamSet};
pub use phantom::{ContrastMode, PhantomSpec};
pub use pyramid::{PyramidConfig, ScalePyramid};
pub use superres::{super_resolve, SrRequest, SrTarget};
pub use trainer::{train_pyramid, TrainConfig, TrainLog, TrainSettings, TrainedPyramid};
pub use volume::{load_volume, save_volume, NormMode, NormParams, ResampleMethod, Shape3, Volume3D};
