//! Deterministic fixtures shared by the benchmarks.

use aslsr_core::{Shape3, Volume3D};
use ndarray::{Array3, Array4};

/// Smooth field with some high-frequency texture; cheap and seed-free.
pub fn field(shape: Shape3) -> Array3<f64> {
    Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| {
        let (x, y, z) = (i as f64, j as f64, k as f64);
        (0.21 * x).sin() * (0.17 * y).cos() + 0.3 * (0.9 * z + 0.4 * x).sin()
    })
}

pub fn channels(c: usize, shape: Shape3) -> Array4<f64> {
    let f = field(shape);
    Array4::from_shape_fn((c, shape[0], shape[1], shape[2]), |(ch, i, j, k)| {
        f[[i, j, k]] * (1.0 + 0.1 * ch as f64)
    })
}

pub fn volume(shape: Shape3, spacing: [f64; 3]) -> Volume3D {
    Volume3D::new(field(shape), spacing, [0.0; 3]).expect("finite fixture")
}
