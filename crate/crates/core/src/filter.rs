//! Separable Gaussian smoothing with replicate boundaries.

use ndarray::{Array3, Axis, Zip};

/// Normalized 1D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut taps: Vec<f64> = (-r..=r).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Default truncation radius, `ceil(3 sigma)`.
pub fn default_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Correlate every lane along `axis` with `taps` (centered), clamping
/// out-of-range samples to the nearest edge sample.
pub fn convolve_axis(data: &Array3<f64>, axis: usize, taps: &[f64]) -> Array3<f64> {
    let radius = (taps.len() / 2) as isize;
    let mut out = Array3::zeros(data.raw_dim());
    let n = data.len_of(Axis(axis)) as isize;
    let mut buf = vec![0.0; n as usize];
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(data.lanes(Axis(axis)))
        .for_each(|mut o, lane| {
            // relative to the first sample so constant lanes stay exact
            let reference = lane[0];
            buf.iter_mut().zip(lane.iter()).for_each(|(b, &v)| *b = v - reference);
            for i in 0..n {
                let mut acc = 0.0;
                for (k, &w) in taps.iter().enumerate() {
                    let j = (i + k as isize - radius).clamp(0, n - 1);
                    acc += w * buf[j as usize];
                }
                o[i as usize] = reference + acc;
            }
        });
    out
}

/// Adjoint of [`convolve_axis`]: scatters each output sample back onto the
/// (clamped) input positions that produced it.
pub fn convolve_axis_adjoint(grad: &Array3<f64>, axis: usize, taps: &[f64]) -> Array3<f64> {
    let radius = (taps.len() / 2) as isize;
    let mut out = Array3::zeros(grad.raw_dim());
    let n = grad.len_of(Axis(axis)) as isize;
    let mut acc = vec![0.0; n as usize];
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(grad.lanes(Axis(axis)))
        .for_each(|mut o, lane| {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for i in 0..n {
                let g = lane[i as usize];
                for (k, &w) in taps.iter().enumerate() {
                    let j = (i + k as isize - radius).clamp(0, n - 1);
                    acc[j as usize] += w * g;
                }
            }
            o.iter_mut().zip(&acc).for_each(|(o, &a)| *o = a);
        });
    out
}

/// Same kernel applied along all three axes.
pub fn smooth_isotropic(data: &Array3<f64>, taps: &[f64]) -> Array3<f64> {
    let x = convolve_axis(data, 0, taps);
    let y = convolve_axis(&x, 1, taps);
    convolve_axis(&y, 2, taps)
}

pub fn smooth_isotropic_adjoint(grad: &Array3<f64>, taps: &[f64]) -> Array3<f64> {
    let z = convolve_axis_adjoint(grad, 2, taps);
    let y = convolve_axis_adjoint(&z, 1, taps);
    convolve_axis_adjoint(&y, 0, taps)
}
