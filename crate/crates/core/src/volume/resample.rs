//! Separable grid resampling (nearest, linear, cubic B-spline).
//!
//! Sample positions use the align-corners convention: the first and last
//! voxel centres of the source and target grids coincide, so resampling to
//! the same shape is the identity.

use std::str::FromStr;

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{Shape3, Volume3D};
use crate::error::{Error, Result};
use crate::filter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMethod {
    Nearest,
    Linear,
    /// Interpolating cubic B-spline with mirror boundaries.
    Spline,
}

impl ResampleMethod {
    pub const ALL: [ResampleMethod; 3] = [Self::Nearest, Self::Linear, Self::Spline];

    pub fn name(self) -> &'static str {
        match self {
            Self::Nearest => "nearest",
            Self::Linear => "linear",
            Self::Spline => "spline",
        }
    }
}

impl std::fmt::Display for ResampleMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(Self::Nearest),
            "linear" | "trilinear" => Ok(Self::Linear),
            "spline" | "cubic" => Ok(Self::Spline),
            other => Err(Error::Config(format!("unknown resample method `{other}`"))),
        }
    }
}

fn check_target(target: Shape3) -> Result<()> {
    if target.contains(&0) {
        return Err(Error::Geometry(format!("target shape {target:?} has an empty axis")));
    }
    Ok(())
}

fn resampled_geometry(v: &Volume3D, target: Shape3) -> [f64; 3] {
    let s = v.shape();
    [0, 1, 2].map(|i| v.spacing()[i] * s[i] as f64 / target[i] as f64)
}

/// Resample onto `target_shape`. Output spacing is scaled by
/// `input_shape / target_shape` per axis; the origin is kept.
pub fn resample(v: &Volume3D, target_shape: Shape3, method: ResampleMethod) -> Result<Volume3D> {
    check_target(target_shape)?;
    let data = resample_grid(v.data(), target_shape, method);
    Volume3D::new(data, resampled_geometry(v, target_shape), v.origin())
}

/// Anti-aliased downsampling: Gaussian pre-blur with sigma `0.5 * zoom` on
/// every shrinking axis, then linear interpolation. Axes that grow or keep
/// their size are interpolated without blur.
pub fn downsample(v: &Volume3D, target_shape: Shape3) -> Result<Volume3D> {
    check_target(target_shape)?;
    let data = downsample_grid(v.data(), target_shape);
    Volume3D::new(data, resampled_geometry(v, target_shape), v.origin())
}

pub fn resample_grid(data: &Array3<f64>, target: Shape3, method: ResampleMethod) -> Array3<f64> {
    let mut out = data.to_owned();
    for axis in 0..3 {
        if out.len_of(Axis(axis)) != target[axis] {
            out = resample_axis(&out, axis, target[axis], method);
        }
    }
    out
}

pub fn downsample_grid(data: &Array3<f64>, target: Shape3) -> Array3<f64> {
    let mut blurred = data.to_owned();
    for axis in 0..3 {
        let zoom = data.len_of(Axis(axis)) as f64 / target[axis] as f64;
        if zoom > 1.0 {
            let sigma = 0.5 * zoom;
            let taps = filter::gaussian_kernel(sigma, filter::default_radius(sigma));
            blurred = filter::convolve_axis(&blurred, axis, &taps);
        }
    }
    resample_grid(&blurred, target, ResampleMethod::Linear)
}

/// Linear when growing, anti-aliased when shrinking.
pub fn resize_grid(data: &Array3<f64>, target: Shape3) -> Array3<f64> {
    downsample_grid(data, target)
}

/// Source coordinate (in source voxel units) of target sample `j`.
fn source_coord(j: usize, n_src: usize, n_dst: usize) -> f64 {
    if n_dst == 1 {
        (n_src - 1) as f64 / 2.0
    } else {
        (j * (n_src - 1)) as f64 / (n_dst - 1) as f64
    }
}

fn resample_axis(data: &Array3<f64>, axis: usize, m: usize, method: ResampleMethod) -> Array3<f64> {
    let n = data.len_of(Axis(axis));
    let mut shape = [data.dim().0, data.dim().1, data.dim().2];
    shape[axis] = m;
    let mut out = Array3::zeros(shape);
    let coords: Vec<f64> = (0..m).map(|j| source_coord(j, n, m)).collect();
    let mut lane_buf = vec![0.0; n];
    let mut coeffs = vec![0.0; n];
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(data.lanes(Axis(axis)))
        .for_each(|mut o, lane| {
            // Work relative to the first sample so constant lanes stay exact.
            let reference = lane[0];
            lane_buf
                .iter_mut()
                .zip(lane.iter())
                .for_each(|(b, &v)| *b = v - reference);
            match method {
                ResampleMethod::Nearest => {
                    for (o, &u) in o.iter_mut().zip(&coords) {
                        let i = (u.round() as usize).min(n - 1);
                        *o = reference + lane_buf[i];
                    }
                }
                ResampleMethod::Linear => {
                    for (o, &u) in o.iter_mut().zip(&coords) {
                        let i0 = (u.floor() as usize).min(n - 1);
                        let i1 = (i0 + 1).min(n - 1);
                        let t = u - i0 as f64;
                        let a = lane_buf[i0];
                        *o = reference + (a + t * (lane_buf[i1] - a));
                    }
                }
                ResampleMethod::Spline => {
                    coeffs.copy_from_slice(&lane_buf);
                    bspline_prefilter(&mut coeffs);
                    for (o, &u) in o.iter_mut().zip(&coords) {
                        *o = reference + bspline_eval(&coeffs, u);
                    }
                }
            }
        });
    out
}

const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2

fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k > n as isize - 1 {
        k = period - k;
    }
    k as usize
}

/// In-place conversion of samples to cubic B-spline coefficients
/// (whole-sample mirror boundary).
fn bspline_prefilter(c: &mut [f64]) {
    let n = c.len();
    if n == 1 {
        return;
    }
    let z = POLE;
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    c.iter_mut().for_each(|v| *v *= gain);

    // Causal initialization, exact for the mirror extension.
    let horizon = n.min(64);
    let mut zn = z;
    let mut sum = c[0];
    if horizon < n {
        for &v in &c[1..horizon] {
            sum += zn * v;
            zn *= z;
        }
    } else {
        let iz = 1.0 / z;
        let mut z2n = z.powi(n as i32 - 1);
        sum = c[0] + z2n * c[n - 1];
        z2n = z2n * z2n * iz;
        for &v in &c[1..n - 1] {
            sum += (zn + z2n) * v;
            zn *= z;
            z2n *= iz;
        }
        sum /= 1.0 - zn * zn;
    }
    c[0] = sum;
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}

fn bspline_eval(c: &[f64], u: f64) -> f64 {
    let n = c.len();
    let i = u.floor();
    let t = u - i;
    let i = i as isize;
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        (1.0 - t).powi(3) / 6.0,
        (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0,
        (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0,
        t3 / 6.0,
    ];
    (0..4).map(|k| w[k] * c[mirror(i - 1 + k as isize, n)]).sum()
}
