//! Single-pass generation: upsample the low-resolution volume to the target
//! grid and refine it with the finest generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainedPyramid;
use crate::volume::{resample, ResampleMethod, Shape3, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrTarget {
    /// Explicit shape; spacing follows from the input's physical extent.
    Shape(Shape3),
    /// Adopt the prior's grid (shape, spacing and origin).
    MatchPrior,
}

#[derive(Debug, Clone, Copy)]
pub struct SrRequest<'a> {
    pub trained: &'a TrainedPyramid,
    /// Low-resolution ASL volume, in original intensity units.
    pub x: &'a Volume3D,
    /// Anatomical prior, on the target grid or any registered grid.
    pub a_hr: &'a Volume3D,
    pub target: SrTarget,
}

/// Run generation. Consumes no randomness; repeated calls are identical.
pub fn super_resolve(req: &SrRequest<'_>) -> Result<Volume3D> {
    let x = req.x;
    let target = match req.target {
        SrTarget::Shape(s) => s,
        SrTarget::MatchPrior => req.a_hr.shape(),
    };
    if let Some(axis) = (0..3).find(|&i| target[i] < x.shape()[i]) {
        return Err(Error::Config(format!(
            "target {target:?} is smaller than the input {:?} along axis {}",
            x.shape(),
            ["x", "y", "z"][axis]
        )));
    }
    let g = req.trained.finest();
    let r = req.trained.settings.pyramid.scale_factor;
    let zoom = (0..3)
        .map(|i| target[i] as f64 / x.shape()[i] as f64)
        .fold(1.0, f64::max);
    if zoom > r * r {
        log::warn!("zoom {zoom:.2} exceeds the trained refinement ratio {r:.2} squared; running a single pass anyway");
    }

    let x_up = resample(x, target, ResampleMethod::Linear)?;
    let a_up = if req.a_hr.shape() == target {
        req.a_hr.clone()
    } else {
        resample(req.a_hr, target, ResampleMethod::Linear)?
    };
    let (spacing, origin) = match req.target {
        SrTarget::Shape(_) => (x_up.spacing(), x_up.origin()),
        SrTarget::MatchPrior => (a_up.spacing(), a_up.origin()),
    };
    let (ex, ea) = (extent(target, x_up.spacing()), extent(target, a_up.spacing()));
    if (0..3).any(|i| (ex[i] - ea[i]).abs() > x.spacing()[i]) {
        log::warn!("upsampled ASL extent {ex:?} mm and prior extent {ea:?} mm differ by more than one input voxel");
    }

    let xn = req.trained.asl_norm.apply_grid(x_up.data());
    let an = req.trained.prior_norm.apply_grid(a_up.data());
    drop(x_up);
    drop(a_up);
    let out = g.forward(&xn, &an)?;
    let out = req.trained.asl_norm.invert_grid(&out);
    Volume3D::new(out, spacing, origin)
}

fn extent(shape: Shape3, spacing: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| shape[i] as f64 * spacing[i])
}
