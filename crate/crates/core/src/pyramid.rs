//! Multi-scale shape planning and the aligned ASL / prior training pyramid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{downsample, resample, ResampleMethod, Shape3, Volume3D};

/// Smallest extent any axis may take at any scale.
pub const MIN_AXIS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    /// Per-level zoom factor `r > 1`.
    pub scale_factor: f64,
    /// Number of scales `N + 1`; derived from `min_extent` when absent.
    pub num_scales: Option<usize>,
    /// Smallest allowed axis length at scale 0.
    pub min_extent: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            scale_factor: 4.0 / 3.0,
            num_scales: None,
            min_extent: 12,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor.is_finite() && self.scale_factor > 1.0) {
            return Err(Error::Config(format!(
                "pyramid.scale_factor must be > 1, got {}",
                self.scale_factor
            )));
        }
        if let Some(n) = self.num_scales {
            if n < 2 {
                return Err(Error::Config(format!("pyramid.num_scales must be at least 2, got {n}")));
            }
        }
        if self.min_extent < MIN_AXIS {
            return Err(Error::Config(format!(
                "pyramid.min_extent must be at least {MIN_AXIS}, got {}",
                self.min_extent
            )));
        }
        Ok(())
    }
}

const AXES: [&str; 3] = ["x", "y", "z"];

/// Shape of scale `n` out of `N + 1` scales: `round(base / r^(N - n))` per
/// axis, never below [`MIN_AXIS`].
pub fn scale_shape(base: Shape3, r: f64, levels_below_top: usize) -> Shape3 {
    let f = r.powi(levels_below_top as i32);
    base.map(|b| ((b as f64 / f).round() as usize).max(MIN_AXIS))
}

/// Shapes for scales `0..=N`, coarsest first, ending at `base`.
pub fn plan_scales(base: Shape3, config: &PyramidConfig) -> Result<Vec<Shape3>> {
    config.validate()?;
    if let Some(axis) = (0..3).find(|&a| base[a] < config.min_extent) {
        return Err(Error::Config(format!(
            "base extent {} along axis {} is below min_extent {}",
            base[axis], AXES[axis], config.min_extent
        )));
    }
    let r = config.scale_factor;
    let coarsest_ok = |n_top: usize| -> std::result::Result<(), usize> {
        let f = r.powi(n_top as i32);
        match (0..3).find(|&a| ((base[a] as f64 / f).round() as usize) < config.min_extent) {
            Some(a) => Err(a),
            None => Ok(()),
        }
    };
    let top = match config.num_scales {
        Some(n) => {
            if let Err(axis) = coarsest_ok(n - 1) {
                return Err(Error::Config(format!(
                    "{n} scales with factor {r} shrink axis {} below min_extent {} at scale 0",
                    AXES[axis], config.min_extent
                )));
            }
            n - 1
        }
        None => {
            let mut top = 0;
            while coarsest_ok(top + 1).is_ok() {
                top += 1;
            }
            if top == 0 {
                let axis = coarsest_ok(1).unwrap_err();
                return Err(Error::Config(format!(
                    "factor {r} leaves no room for two scales: axis {} would drop below min_extent {}",
                    AXES[axis], config.min_extent
                )));
            }
            top
        }
    };
    Ok((0..=top).map(|n| scale_shape(base, r, top - n)).collect())
}

/// One pyramid level: ASL label and prior on the same grid.
#[derive(Debug, Clone)]
pub struct ScaleLevel {
    pub x: Volume3D,
    pub a: Volume3D,
}

impl ScaleLevel {
    pub fn shape(&self) -> Shape3 {
        self.x.shape()
    }
}

#[derive(Debug, Clone)]
pub struct ScalePyramid {
    levels: Vec<ScaleLevel>,
    shapes: Vec<Shape3>,
    base_x: Volume3D,
    base_a: Volume3D,
    config: PyramidConfig,
}

impl ScalePyramid {
    pub fn levels(&self) -> &[ScaleLevel] {
        &self.levels
    }

    pub fn level(&self, n: usize) -> &ScaleLevel {
        &self.levels[n]
    }

    pub fn shapes(&self) -> &[Shape3] {
        &self.shapes
    }

    pub fn num_scales(&self) -> usize {
        self.levels.len()
    }

    pub fn base_x(&self) -> &Volume3D {
        &self.base_x
    }

    /// Prior on the ASL grid (already resampled if it arrived finer).
    pub fn base_a(&self) -> &Volume3D {
        &self.base_a
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.config
    }
}

/// Resample the prior onto the ASL grid, checking that both cover the same
/// physical field of view to within one ASL voxel.
pub fn align_prior(x: &Volume3D, a: &Volume3D) -> Result<Volume3D> {
    let (ex, ea) = (x.extent(), a.extent());
    let (ox, oa) = (x.origin(), a.origin());
    for axis in 0..3 {
        let tol = x.spacing()[axis] + 1e-9;
        if (ex[axis] - ea[axis]).abs() > tol || (ox[axis] - oa[axis]).abs() > tol {
            return Err(Error::Geometry(format!(
                "prior and ASL grids are not registered along {}: extents {:.3} vs {:.3} mm, origins {:.3} vs {:.3} mm",
                AXES[axis], ea[axis], ex[axis], oa[axis], ox[axis]
            )));
        }
    }
    let aligned = if a.shape() == x.shape() {
        a.data().clone()
    } else {
        crate::volume::resize_grid(a.data(), x.shape())
    };
    Volume3D::new(aligned, x.spacing(), x.origin())
}

/// Build the aligned `(x_n, a_n)` pyramid with anti-aliased downsampling.
pub fn build_pyramid(x: &Volume3D, a: &Volume3D, config: &PyramidConfig) -> Result<ScalePyramid> {
    let shapes = plan_scales(x.shape(), config)?;
    let a_on_x = align_prior(x, a)?;
    let top = shapes.len() - 1;
    let mut levels = Vec::with_capacity(shapes.len());
    for (n, &shape) in shapes.iter().enumerate() {
        let level = if n == top {
            ScaleLevel {
                x: x.clone(),
                a: a_on_x.clone(),
            }
        } else {
            ScaleLevel {
                x: downsample(x, shape)?,
                a: downsample(&a_on_x, shape)?,
            }
        };
        if level.x.shape() != level.a.shape() {
            return Err(Error::Geometry(format!(
                "scale {n}: ASL {:?} and prior {:?} disagree",
                level.x.shape(),
                level.a.shape()
            )));
        }
        levels.push(level);
    }
    Ok(ScalePyramid {
        levels,
        shapes,
        base_x: x.clone(),
        base_a: a_on_x,
        config: config.clone(),
    })
}

/// Upsample a coarse grid onto a finer scale, as used between cascade stages.
pub fn upsample_to(v: &Volume3D, shape: Shape3) -> Result<Volume3D> {
    resample(v, shape, ResampleMethod::Linear)
}
