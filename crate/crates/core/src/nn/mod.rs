//! Networks: the per-scale 3D U-Net generator, the patch critic, and the
//! small amount of machinery they need (dense kernels, a reverse-mode tape,
//! parameter sets, checkpoints, Adam).

pub mod adam;
pub mod checkpoint;
pub mod discriminator;
pub mod generator;
pub mod ops;
pub mod params;
pub mod tape;

use ndarray::Array3;

use crate::error::Result;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NetworkKind};
pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{Generator, GeneratorPass, GeneratorSpec};
pub use params::{NamedTensor, ParamSet};

/// Value and gradients of `mean(D(v))`.
#[derive(Debug, Clone)]
pub struct CriticGrad {
    pub mean_score: f64,
    /// Gradient with respect to the input volume.
    pub input: Array3<f64>,
    /// Gradient with respect to the critic's parameters.
    pub params: ParamSet,
    /// Number of patch scores averaged.
    pub cells: usize,
}

/// Anything usable as a Wasserstein critic on single-channel volumes.
///
/// The gradient penalty needs derivatives of `<u, grad_v mean D(v)>`, so
/// critics expose that mixed second-order quantity directly.
pub trait Critic {
    /// Patch score map for `v`.
    fn scores(&self, v: &Array3<f64>) -> Result<Array3<f64>>;

    fn mean_score(&self, v: &Array3<f64>) -> Result<f64> {
        Ok(self.scores(v)?.mean().unwrap_or(0.0))
    }

    fn mean_score_grad(&self, v: &Array3<f64>) -> Result<CriticGrad>;

    /// Gradients of `phi = <u, grad_v mean D(v)>` with respect to `v`
    /// (a Hessian-vector product) and to the parameters.
    fn direction_grad(&self, v: &Array3<f64>, u: &Array3<f64>) -> Result<(Array3<f64>, ParamSet)>;

    /// Empty for parameter-free critics.
    fn params(&self) -> &ParamSet;
}
