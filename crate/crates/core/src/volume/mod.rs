//! Volumetric data model, intensity normalization, resampling and file I/O.
//!
//! Every stage of the pipeline exchanges [`Volume3D`] values: a dense
//! `(x, y, z)` grid of intensities plus voxel spacing and origin in mm.

mod io;
mod nifti;
mod raw;
mod resample;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_volume, save_volume, VolumeFormat};
pub use resample::{downsample, downsample_grid, resample, resample_grid, resize_grid, ResampleMethod};

/// Grid extents `(nx, ny, nz)`.
pub type Shape3 = [usize; 3];

/// A 3D scalar volume with physical geometry.
///
/// The voxel grid, spacing and origin are fixed at construction. The data is
/// guaranteed finite and the spacing strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    data: Array3<f64>,
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl Volume3D {
    pub fn new(data: Array3<f64>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if let Some(axis) = spacing.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing along axis {axis} must be positive and finite, got {}",
                spacing[axis]
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!("origin {origin:?} is not finite")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotFinite("volume data contains NaN or Inf".into()));
        }
        if data.is_empty() {
            return Err(Error::Geometry("volume has an empty axis".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            spacing,
            origin,
        })
    }

    /// Unit-spacing volume at the origin.
    pub fn from_data(data: Array3<f64>) -> Result<Self> {
        Self::new(data, [1.0; 3], [0.0; 3])
    }

    pub fn filled(shape: Shape3, value: f64, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Self::new(Array3::from_elem(shape, value), spacing, origin)
    }

    pub fn from_fn(
        shape: Shape3,
        spacing: [f64; 3],
        origin: [f64; 3],
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn(shape, f), spacing, origin)
    }

    pub fn shape(&self) -> Shape3 {
        let (x, y, z) = self.data.dim();
        [x, y, z]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    /// Physical size `shape * spacing` along each axis.
    pub fn extent(&self) -> [f64; 3] {
        let s = self.shape();
        [0, 1, 2].map(|i| s[i] as f64 * self.spacing[i])
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    /// New volume on the same geometry with different voxel values.
    pub fn with_data(&self, data: Array3<f64>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::Geometry(format!(
                "replacement data has shape {:?}, volume has {:?}",
                data.dim(),
                self.data.dim()
            )));
        }
        Self::new(data, self.spacing, self.origin)
    }

    pub fn mean(&self) -> f64 {
        self.data.sum() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Affine map of `[min, max]` onto `[-1, 1]`.
    #[default]
    #[serde(rename = "min_max_to_unit")]
    MinMaxToUnit,
    #[serde(rename = "zscore")]
    ZScore,
}

/// Affine intensity map `normalized = (v - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub shift: f64,
    pub scale: f64,
    pub mode: NormMode,
}

impl NormParams {
    /// Fit parameters to a grid. Constant grids get `scale = 1` and
    /// `shift = min` (z-score: `shift = mean`).
    pub fn fit(data: &Array3<f64>, mode: NormMode) -> Self {
        let n = data.len() as f64;
        match mode {
            NormMode::MinMaxToUnit => {
                let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
                if hi > lo {
                    Self {
                        shift: 0.5 * (hi + lo),
                        scale: 0.5 * (hi - lo),
                        mode,
                    }
                } else {
                    Self {
                        shift: lo,
                        scale: 1.0,
                        mode,
                    }
                }
            }
            NormMode::ZScore => {
                let mean = data.sum() / n;
                let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                Self {
                    shift: mean,
                    scale: if std > 0.0 { std } else { 1.0 },
                    mode,
                }
            }
        }
    }

    pub fn apply_grid(&self, data: &Array3<f64>) -> Array3<f64> {
        data.mapv(|v| (v - self.shift) / self.scale)
    }

    pub fn invert_grid(&self, data: &Array3<f64>) -> Array3<f64> {
        data.mapv(|v| v * self.scale + self.shift)
    }

    pub fn apply(&self, v: &Volume3D) -> Result<Volume3D> {
        v.with_data(self.apply_grid(v.data()))
    }

    pub fn invert(&self, v: &Volume3D) -> Result<Volume3D> {
        v.with_data(self.invert_grid(v.data()))
    }
}

pub fn normalize(v: &Volume3D, mode: NormMode) -> Result<(Volume3D, NormParams)> {
    let params = NormParams::fit(v.data(), mode);
    Ok((params.apply(v)?, params))
}

pub fn denormalize(v: &Volume3D, params: &NormParams) -> Result<Volume3D> {
    params.invert(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_geometry_and_values() {
        let data = Array3::zeros((2, 2, 2));
        assert!(matches!(
            Volume3D::new(data.clone(), [1.0, 0.0, 1.0], [0.0; 3]),
            Err(Error::Geometry(_))
        ));
        let mut bad = data;
        bad[[0, 1, 0]] = f64::NAN;
        assert!(Volume3D::from_data(bad).is_err());
    }

    #[test]
    fn min_max_maps_to_unit_interval() {
        let v = Volume3D::from_fn([11, 3, 2], [1.0; 3], [0.0; 3], |(i, _, _)| i as f64).unwrap();
        let (n, p) = normalize(&v, NormMode::MinMaxToUnit).unwrap();
        let (lo, hi) = n.min_max();
        assert_eq!(lo, -1.0);
        assert_eq!(hi, 1.0);
        assert_eq!(p.shift, 5.0);
        assert_eq!(p.scale, 5.0);
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = Volume3D::filled([4, 4, 4], 3.5, [1.0; 3], [0.0; 3]).unwrap();
        for mode in [NormMode::MinMaxToUnit, NormMode::ZScore] {
            let (n, p) = normalize(&v, mode).unwrap();
            assert_eq!(p.scale, 1.0);
            assert!(n.data().iter().all(|&x| x == 0.0));
            assert_eq!(denormalize(&n, &p).unwrap(), v);
        }
    }

    #[test]
    fn normalization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = Volume3D::from_fn([9, 7, 5], [1.0; 3], [0.0; 3], |_| rng.random_range(-40.0..250.0)).unwrap();
        for mode in [NormMode::MinMaxToUnit, NormMode::ZScore] {
            let (n, p) = normalize(&v, mode).unwrap();
            let back = denormalize(&n, &p).unwrap();
            for (a, b) in back.data().iter().zip(v.data()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }
}
