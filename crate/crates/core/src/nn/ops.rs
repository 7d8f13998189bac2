//! Dense kernels on `(channels, x, y, z)` tensors and their adjoints.
//!
//! Convolutions use odd cubic kernels with replicate padding of `k / 2`, so
//! a stride-1 convolution preserves the spatial shape and a stride-`s`
//! convolution produces `ceil(n / s)` samples per axis.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, Array5, ArrayView1, ArrayView4, ArrayView5, Axis};

/// Upper bound on im2col buffer entries per chunk.
const COL_BUDGET: usize = 1 << 21;

pub fn conv_out_len(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

/// Replicate-pad the three spatial axes.
pub fn pad_replicate(x: ArrayView4<f64>, before: [usize; 3], after: [usize; 3]) -> Array4<f64> {
    let (c, nx, ny, nz) = x.dim();
    let (px, py, pz) = (
        nx + before[0] + after[0],
        ny + before[1] + after[1],
        nz + before[2] + after[2],
    );
    let mut out = Array4::zeros((c, px, py, pz));
    let clamp = |i: usize, b: usize, n: usize| i.saturating_sub(b).min(n - 1);
    for ci in 0..c {
        for i in 0..px {
            let si = clamp(i, before[0], nx);
            for j in 0..py {
                let sj = clamp(j, before[1], ny);
                let src = x.slice(s![ci, si, sj, ..]);
                let mut dst = out.slice_mut(s![ci, i, j, ..]);
                for k in 0..pz {
                    dst[k] = src[clamp(k, before[2], nz)];
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad_replicate`]: folds padded gradients onto edge voxels.
pub fn pad_replicate_adjoint(g: ArrayView4<f64>, before: [usize; 3], after: [usize; 3]) -> Array4<f64> {
    let (c, px, py, pz) = g.dim();
    let (nx, ny, nz) = (
        px - before[0] - after[0],
        py - before[1] - after[1],
        pz - before[2] - after[2],
    );
    let mut out = Array4::zeros((c, nx, ny, nz));
    let clamp = |i: usize, b: usize, n: usize| i.saturating_sub(b).min(n - 1);
    for ci in 0..c {
        for i in 0..px {
            let si = clamp(i, before[0], nx);
            for j in 0..py {
                let sj = clamp(j, before[1], ny);
                let src = g.slice(s![ci, i, j, ..]);
                let mut dst = out.slice_mut(s![ci, si, sj, ..]);
                for k in 0..pz {
                    dst[clamp(k, before[2], nz)] += src[k];
                }
            }
        }
    }
    out
}

struct ConvGeometry {
    cin: usize,
    k: usize,
    stride: usize,
    padded: [usize; 3],
    out: [usize; 3],
}

impl ConvGeometry {
    fn new(cin: usize, spatial: [usize; 3], k: usize, stride: usize) -> Self {
        let p = k / 2;
        Self {
            cin,
            k,
            stride,
            padded: spatial.map(|n| n + 2 * p),
            out: spatial.map(|n| conv_out_len(n, k, stride)),
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn positions(&self) -> usize {
        self.out[0] * self.plane()
    }

    /// Output-x slabs sized to keep the column buffer under budget.
    fn chunks(&self) -> impl Iterator<Item = Range<usize>> {
        let per_slab = (self.rows() * self.plane()).max(1);
        let step = (COL_BUDGET / per_slab).max(1);
        let nx = self.out[0];
        (0..nx).step_by(step).map(move |x0| x0..(x0 + step).min(nx))
    }

    fn pad(&self) -> usize {
        self.k / 2
    }
}

fn im2col(p: &[f64], g: &ConvGeometry, ox: Range<usize>) -> Array2<f64> {
    let [_, yp, zp] = g.padded;
    let xp = g.padded[0];
    let (k, s) = (g.k, g.stride);
    let [_, oyn, ozn] = g.out;
    let npos = ox.len() * oyn * ozn;
    let mut col = Array2::<f64>::zeros((g.rows(), npos));
    let cs = col.as_slice_mut().expect("fresh array is contiguous");
    for ci in 0..g.cin {
        for dx in 0..k {
            for dy in 0..k {
                for dz in 0..k {
                    let row = ((ci * k + dx) * k + dy) * k + dz;
                    let dst = &mut cs[row * npos..(row + 1) * npos];
                    let mut idx = 0;
                    for oxi in ox.clone() {
                        let xi = oxi * s + dx;
                        for oy in 0..oyn {
                            let base = ((ci * xp + xi) * yp + oy * s + dy) * zp + dz;
                            if s == 1 {
                                dst[idx..idx + ozn].copy_from_slice(&p[base..base + ozn]);
                            } else {
                                for (oz, d) in dst[idx..idx + ozn].iter_mut().enumerate() {
                                    *d = p[base + oz * s];
                                }
                            }
                            idx += ozn;
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add(col: &Array2<f64>, dp: &mut [f64], g: &ConvGeometry, ox: Range<usize>) {
    let [xp, yp, zp] = g.padded;
    let (k, s) = (g.k, g.stride);
    let [_, oyn, ozn] = g.out;
    let npos = ox.len() * oyn * ozn;
    let cs = col.as_slice().expect("contiguous column buffer");
    for ci in 0..g.cin {
        for dx in 0..k {
            for dy in 0..k {
                for dz in 0..k {
                    let row = ((ci * k + dx) * k + dy) * k + dz;
                    let src = &cs[row * npos..(row + 1) * npos];
                    let mut idx = 0;
                    for oxi in ox.clone() {
                        let xi = oxi * s + dx;
                        for oy in 0..oyn {
                            let base = ((ci * xp + xi) * yp + oy * s + dy) * zp + dz;
                            for oz in 0..ozn {
                                dp[base + oz * s] += src[idx + oz];
                            }
                            idx += ozn;
                        }
                    }
                }
            }
        }
    }
}

fn spatial(x: &ArrayView4<f64>) -> [usize; 3] {
    let (_, a, b, c) = x.dim();
    [a, b, c]
}

/// Cross-correlation `w * pad(x)` plus optional per-channel bias.
///
/// `w` has shape `(cout, cin, k, k, k)`.
pub fn conv3d(x: ArrayView4<f64>, w: ArrayView5<f64>, bias: Option<ArrayView1<f64>>, stride: usize) -> Array4<f64> {
    let (cout, cin, k, _, _) = w.dim();
    assert_eq!(cin, x.dim().0, "conv3d channel mismatch");
    let g = ConvGeometry::new(cin, spatial(&x), k, stride);
    let pad = g.pad();
    let p = pad_replicate(x, [pad; 3], [pad; 3]);
    let ps = p.as_slice().expect("contiguous padded input");
    let w = w.as_standard_layout();
    let w2 = w
        .view()
        .into_shape_with_order((cout, g.rows()))
        .expect("weights reshape");
    let mut out = Array2::<f64>::zeros((cout, g.positions()));
    let plane = g.plane();
    for ox in g.chunks() {
        let col = im2col(ps, &g, ox.clone());
        let mut dst = out.slice_mut(s![.., ox.start * plane..ox.end * plane]);
        general_mat_mul(1.0, &w2, &col, 0.0, &mut dst);
    }
    if let Some(b) = bias {
        for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    out.into_shape_with_order((cout, g.out[0], g.out[1], g.out[2]))
        .expect("output reshape")
}

/// Gradient of `<conv3d(x, w), dy>` with respect to `w`.
pub fn conv3d_grad_weight(x: ArrayView4<f64>, dy: ArrayView4<f64>, k: usize, stride: usize) -> Array5<f64> {
    let cin = x.dim().0;
    let cout = dy.dim().0;
    let g = ConvGeometry::new(cin, spatial(&x), k, stride);
    debug_assert_eq!(spatial(&dy), g.out);
    let pad = g.pad();
    let p = pad_replicate(x, [pad; 3], [pad; 3]);
    let ps = p.as_slice().expect("contiguous padded input");
    let dy = dy.as_standard_layout();
    let dy2 = dy
        .view()
        .into_shape_with_order((cout, g.positions()))
        .expect("dy reshape");
    let mut dw = Array2::<f64>::zeros((cout, g.rows()));
    let plane = g.plane();
    for ox in g.chunks() {
        let col = im2col(ps, &g, ox.clone());
        let dyc = dy2.slice(s![.., ox.start * plane..ox.end * plane]);
        general_mat_mul(1.0, &dyc, &col.t(), 1.0, &mut dw);
    }
    dw.into_shape_with_order((cout, cin, k, k, k))
        .expect("weight grad reshape")
}

/// Gradient of `<conv3d(x, w), dy>` with respect to `x` (spatial shape `in_shape`).
pub fn conv3d_grad_input(dy: ArrayView4<f64>, w: ArrayView5<f64>, in_shape: [usize; 3], stride: usize) -> Array4<f64> {
    let (cout, cin, k, _, _) = w.dim();
    let g = ConvGeometry::new(cin, in_shape, k, stride);
    debug_assert_eq!(spatial(&dy), g.out);
    let w = w.as_standard_layout();
    let w2 = w
        .view()
        .into_shape_with_order((cout, g.rows()))
        .expect("weights reshape");
    let dy = dy.as_standard_layout();
    let dy2 = dy
        .view()
        .into_shape_with_order((cout, g.positions()))
        .expect("dy reshape");
    let [xp, yp, zp] = g.padded;
    let mut dp = Array4::<f64>::zeros((cin, xp, yp, zp));
    let plane = g.plane();
    {
        let dps = dp.as_slice_mut().expect("fresh array is contiguous");
        for ox in g.chunks() {
            let dyc = dy2.slice(s![.., ox.start * plane..ox.end * plane]);
            let mut dcol = Array2::<f64>::zeros((g.rows(), ox.len() * plane));
            general_mat_mul(1.0, &w2.t(), &dyc, 0.0, &mut dcol);
            col2im_add(&dcol, dps, &g, ox);
        }
    }
    let pad = g.pad();
    pad_replicate_adjoint(dp.view(), [pad; 3], [pad; 3])
}

/// Per-channel sum over the spatial axes.
pub fn channel_sum(x: ArrayView4<f64>) -> Array1<f64> {
    x.outer_iter().map(|c| c.sum()).collect()
}

pub fn leaky_relu(x: ArrayView4<f64>, slope: f64) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// `dy` scaled by the leaky-ReLU derivative evaluated at `x`.
pub fn leaky_relu_grad(x: ArrayView4<f64>, dy: ArrayView4<f64>, slope: f64) -> Array4<f64> {
    let mut out = dy.to_owned();
    out.zip_mut_with(&x, |g, &v| {
        if v <= 0.0 {
            *g *= slope
        }
    });
    out
}

/// 2x2x2 average pooling; spatial extents must be even.
pub fn avg_pool2(x: ArrayView4<f64>) -> Array4<f64> {
    let (c, nx, ny, nz) = x.dim();
    let mut out = Array4::zeros((c, nx / 2, ny / 2, nz / 2));
    for ((ci, i, j, k), o) in out.indexed_iter_mut() {
        let mut acc = 0.0;
        for di in 0..2 {
            for dj in 0..2 {
                for dk in 0..2 {
                    acc += x[[ci, 2 * i + di, 2 * j + dj, 2 * k + dk]];
                }
            }
        }
        *o = acc * 0.125;
    }
    out
}

pub fn avg_pool2_grad(dy: ArrayView4<f64>) -> Array4<f64> {
    let (c, nx, ny, nz) = dy.dim();
    Array4::from_shape_fn((c, 2 * nx, 2 * ny, 2 * nz), |(ci, i, j, k)| {
        0.125 * dy[[ci, i / 2, j / 2, k / 2]]
    })
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: ArrayView4<f64>) -> Array4<f64> {
    let (c, nx, ny, nz) = x.dim();
    Array4::from_shape_fn((c, 2 * nx, 2 * ny, 2 * nz), |(ci, i, j, k)| {
        x[[ci, i / 2, j / 2, k / 2]]
    })
}

pub fn upsample2_grad(dy: ArrayView4<f64>) -> Array4<f64> {
    let (c, nx, ny, nz) = dy.dim();
    let mut out = Array4::zeros((c, nx / 2, ny / 2, nz / 2));
    for ((ci, i, j, k), &g) in dy.indexed_iter() {
        out[[ci, i / 2, j / 2, k / 2]] += g;
    }
    out
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-channel standardization over the spatial axes. Returns the output and
/// each channel's `1 / sqrt(var + eps)`.
pub fn instance_norm(x: ArrayView4<f64>) -> (Array4<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.dim().0);
    for mut ch in out.outer_iter_mut() {
        let n = ch.len() as f64;
        let mean = ch.sum() / n;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        ch.mapv_inplace(|v| (v - mean) * inv);
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// Backward of [`instance_norm`] given its output `y`.
pub fn instance_norm_grad(y: ArrayView4<f64>, inv_std: &[f64], dy: ArrayView4<f64>) -> Array4<f64> {
    let mut out = Array4::zeros(dy.raw_dim());
    for (((mut o, yc), gc), &inv) in out
        .outer_iter_mut()
        .zip(y.outer_iter())
        .zip(dy.outer_iter())
        .zip(inv_std)
    {
        let n = gc.len() as f64;
        let mean_g = gc.sum() / n;
        let mean_gy = (&gc * &yc).sum() / n;
        ndarray::Zip::from(&mut o)
            .and(&yc)
            .and(&gc)
            .for_each(|o, &yv, &g| *o = inv * (g - mean_g - yv * mean_gy));
    }
    out
}
