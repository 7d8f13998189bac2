//! Fully convolutional patch critic: strided conv + leaky ReLU stack ending
//! in a linear one-channel score map.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::generator::{bias_view, init_params, weight_view};
use super::ops;
use super::params::ParamSet;
use super::{Critic, CriticGrad};
use crate::error::{Error, Result};
use crate::volume::Shape3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub layers: usize,
    pub base_width: usize,
    pub kernel: usize,
    /// One stride per layer.
    pub strides: Vec<usize>,
    pub slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            layers: 4,
            base_width: 16,
            kernel: 3,
            strides: vec![2, 2, 1, 1],
            slope: 0.2,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("discriminator: {m}")));
        if self.in_channels != 1 {
            return bad(format!("in_channels must be 1, got {}", self.in_channels));
        }
        if self.layers < 1 {
            return bad("layers must be at least 1".into());
        }
        if self.strides.len() != self.layers {
            return bad(format!(
                "strides lists {} entries for {} layers",
                self.strides.len(),
                self.layers
            ));
        }
        if self.strides.contains(&0) {
            return bad("strides must be positive".into());
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if !(self.slope.is_finite() && self.slope >= 0.0) {
            return bad(format!("slope must be finite and >= 0, got {}", self.slope));
        }
        Ok(())
    }

    /// Output channels of layer `i`: `w`, then `2w` for hidden layers, and a
    /// single score channel last.
    pub fn width(&self, i: usize) -> usize {
        if i + 1 == self.layers {
            1
        } else if i == 0 {
            self.base_width
        } else {
            2 * self.base_width
        }
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for i in 0..self.layers {
            let cout = self.width(i);
            out.push((format!("conv{i}.weight"), vec![cout, cin, k, k, k]));
            out.push((format!("conv{i}.bias"), vec![cout]));
            cin = cout;
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Product of all strides: one score-map cell per this many voxels.
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Receptive field of one score cell, in input voxels per axis.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for &s in &self.strides {
            rf += (self.kernel - 1) * jump;
            jump *= s;
        }
        rf
    }

    /// Smallest accepted input extent: every layer must see at least one
    /// full stride step, so each axis needs `total_stride` voxels.
    pub fn min_input_extent(&self) -> usize {
        self.total_stride()
    }

    pub fn score_shape(&self, input: Shape3) -> Shape3 {
        let mut s = input;
        for &st in &self.strides {
            s = s.map(|n| ops::conv_out_len(n, self.kernel, st));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    params: ParamSet,
    seed: u64,
}

/// Forward activations kept for the backward sweeps.
struct Trace {
    /// Layer inputs `h_0 .. h_{L-1}`.
    inputs: Vec<Array4<f64>>,
    /// Pre-activations `z_1 .. z_L`.
    pre: Vec<Array4<f64>>,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec.layout(), seed, |_| false);
        Ok(Self { spec, params, seed })
    }

    pub fn from_params(spec: DiscriminatorSpec, seed: u64, params: ParamSet) -> Result<Self> {
        let mut d = Self::new(spec, seed)?;
        d.inherit_params(&params)?;
        Ok(d)
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn inherit_params(&mut self, parent: &ParamSet) -> Result<()> {
        self.params.copy_from(parent)
    }

    fn check(&self, v: &Array3<f64>) -> Result<()> {
        let min = self.spec.min_input_extent();
        if let Some(axis) = (0..3).find(|&a| v.shape()[a] < min) {
            return Err(Error::Geometry(format!(
                "critic input {:?} is smaller than the minimum extent {min} along axis {}",
                v.shape(),
                ["x", "y", "z"][axis]
            )));
        }
        Ok(())
    }

    fn weight(&self, i: usize) -> ndarray::ArrayView5<'_, f64> {
        weight_view(&self.params, &format!("conv{i}.weight"))
    }

    fn trace(&self, v: &Array3<f64>) -> Result<Trace> {
        self.check(v)?;
        let mut h = v.view().insert_axis(Axis(0)).to_owned();
        let mut inputs = Vec::with_capacity(self.spec.layers);
        let mut pre = Vec::with_capacity(self.spec.layers);
        for i in 0..self.spec.layers {
            let b = bias_view(&self.params, &format!("conv{i}.bias"));
            let z = ops::conv3d(h.view(), self.weight(i), Some(b), self.spec.strides[i]);
            let next = if i + 1 < self.spec.layers {
                ops::leaky_relu(z.view(), self.spec.slope)
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        Ok(Trace { inputs, pre })
    }

    /// Backward sweep from a constant seed `1 / M` on the score map.
    /// Returns per-layer output signals `delta_1 .. delta_L` and the input
    /// gradient.
    fn deltas(&self, t: &Trace) -> (Vec<Array4<f64>>, Array3<f64>) {
        let last = t.pre.last().expect("at least one layer");
        let m = last.len() as f64;
        let mut delta = Array4::from_elem(last.raw_dim(), 1.0 / m);
        let mut out = vec![Array4::zeros((0, 0, 0, 0)); self.spec.layers];
        for i in (0..self.spec.layers).rev() {
            let x = &t.inputs[i];
            let (_, a, b, c) = x.dim();
            let g = ops::conv3d_grad_input(delta.view(), self.weight(i), [a, b, c], self.spec.strides[i]);
            let next = if i > 0 {
                ops::leaky_relu_grad(t.pre[i - 1].view(), g.view(), self.spec.slope)
            } else {
                g
            };
            out[i] = std::mem::replace(&mut delta, next);
        }
        (out, delta.index_axis_move(Axis(0), 0))
    }

    /// Sign pattern of every hidden pre-activation. The critic is linear in
    /// its input and in each weight tensor while this pattern is fixed.
    pub fn activation_pattern(&self, v: &Array3<f64>) -> Result<Vec<bool>> {
        let t = self.trace(v)?;
        let hidden = &t.pre[..t.pre.len() - 1];
        Ok(hidden.iter().flat_map(|z| z.iter().map(|&v| v > 0.0)).collect())
    }
}

impl Critic for Discriminator {
    fn scores(&self, v: &Array3<f64>) -> Result<Array3<f64>> {
        let mut t = self.trace(v)?;
        let z = t.pre.pop().expect("at least one layer");
        Ok(z.index_axis_move(Axis(0), 0))
    }

    fn mean_score_grad(&self, v: &Array3<f64>) -> Result<CriticGrad> {
        let t = self.trace(v)?;
        let last = t.pre.last().expect("layer");
        let (mean_score, cells) = (last.mean().unwrap_or(0.0), last.len());
        let (deltas, input) = self.deltas(&t);
        let mut params = self.params.zeros_like();
        for (i, d) in deltas.iter().enumerate() {
            let k = self.spec.kernel;
            let dw = ops::conv3d_grad_weight(t.inputs[i].view(), d.view(), k, self.spec.strides[i]);
            params
                .get_mut(&format!("conv{i}.weight"))
                .expect("layout")
                .assign(&dw.into_dyn());
            params
                .get_mut(&format!("conv{i}.bias"))
                .expect("layout")
                .assign(&ops::channel_sum(d.view()).into_dyn());
        }
        Ok(CriticGrad {
            mean_score,
            input,
            params,
            cells,
        })
    }

    fn direction_grad(&self, v: &Array3<f64>, u: &Array3<f64>) -> Result<(Array3<f64>, ParamSet)> {
        if u.shape() != v.shape() {
            return Err(Error::Geometry(format!(
                "direction {:?} does not match input {:?}",
                u.shape(),
                v.shape()
            )));
        }
        // Piecewise linear network: the input Hessian and every bias
        // derivative vanish, and each weight derivative pairs the forward
        // tangent along `u` with the ordinary backward signal.
        let t = self.trace(v)?;
        let (deltas, _) = self.deltas(&t);
        let mut params = self.params.zeros_like();
        let mut e = u.view().insert_axis(Axis(0)).to_owned();
        for (i, d) in deltas.iter().enumerate() {
            let k = self.spec.kernel;
            let s = self.spec.strides[i];
            let dw = ops::conv3d_grad_weight(e.view(), d.view(), k, s);
            params
                .get_mut(&format!("conv{i}.weight"))
                .expect("layout")
                .assign(&dw.into_dyn());
            if i + 1 < self.spec.layers {
                let tangent = ops::conv3d(e.view(), self.weight(i), None, s);
                let z = &t.pre[i];
                e = ndarray::Zip::from(&tangent)
                    .and(z)
                    .map_collect(|&tv, &zv| if zv > 0.0 { tv } else { self.spec.slope * tv });
            }
        }
        Ok((Array3::zeros(v.raw_dim()), params))
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }
}

/// Shape of a rank-4 gradient as a spatial triple (test helper).
#[cfg(test)]
fn spatial(a: &Array4<f64>) -> Shape3 {
    let (_, x, y, z) = a.dim();
    [x, y, z]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(shape: Shape3, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
    }

    fn small() -> DiscriminatorSpec {
        DiscriminatorSpec {
            base_width: 4,
            ..Default::default()
        }
    }

    #[test]
    fn score_map_follows_stride_arithmetic() {
        let d = Discriminator::new(DiscriminatorSpec::default(), 0).unwrap();
        let s = d.scores(&noise([32, 32, 32], 1)).unwrap();
        assert_eq!(s.dim(), (8, 8, 8));
        assert_eq!(d.spec().score_shape([32, 32, 32]), [8, 8, 8]);
        assert_eq!(d.spec().receptive_field(), 23);
    }

    #[test]
    fn fully_convolutional() {
        let d = Discriminator::new(small(), 1).unwrap();
        let a = d.scores(&noise([16, 12, 8], 2)).unwrap();
        let b = d.scores(&noise([32, 24, 16], 2)).unwrap();
        assert_eq!(
            spatial(&a.insert_axis(Axis(0))).map(|n| 2 * n),
            spatial(&b.insert_axis(Axis(0)))
        );
        let v = noise([16, 16, 16], 3);
        assert_eq!(d.scores(&v).unwrap(), d.scores(&v).unwrap());
    }

    #[test]
    fn too_small_input_is_a_geometry_error() {
        let d = Discriminator::new(small(), 1).unwrap();
        assert!(matches!(d.scores(&noise([16, 3, 16], 0)), Err(Error::Geometry(_))));
    }

    #[test]
    fn translation_covariant_at_stride_granularity() {
        let d = Discriminator::new(small(), 4).unwrap();
        let stride = d.spec().total_stride();
        let base = noise([64 + stride, 8, 8], 5);
        let a = base.slice(s![..64, .., ..]).to_owned();
        let b = base.slice(s![stride.., .., ..]).to_owned();
        let (sa, sb) = (d.scores(&a).unwrap(), d.scores(&b).unwrap());
        // border effects reach at most half a receptive field into the map
        let margin = d.spec().receptive_field().div_ceil(2 * stride);
        for c in margin..sa.dim().0 - margin - 1 {
            let diff = (&sa.slice(s![c + 1, .., ..]) - &sb.slice(s![c, .., ..]))
                .mapv(f64::abs)
                .fold(0.0f64, |m, &v| m.max(v));
            assert!(diff < 1e-5, "cell {c}: {diff}");
        }
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn mean_score_gradients_match_finite_differences() {
        let mut d = Discriminator::new(small(), 7).unwrap();
        let v = noise([8, 8, 8], 8);
        let g = d.mean_score_grad(&v).unwrap();
        let eps = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = d.params().num_scalars();
        let mut checked = 0;
        while checked < 10 {
            let i = rng.random_range(0..n);
            let orig = d.params().flat(i);
            d.params_mut().set_flat(i, orig + eps);
            let (up, pu) = (d.mean_score(&v).unwrap(), d.activation_pattern(&v).unwrap());
            d.params_mut().set_flat(i, orig - eps);
            let (down, pd) = (d.mean_score(&v).unwrap(), d.activation_pattern(&v).unwrap());
            d.params_mut().set_flat(i, orig);
            if pu != pd {
                continue;
            }
            let fd = (up - down) / (2.0 * eps);
            assert!(
                rel_close(fd, g.params.flat(i), 1e-3),
                "{}: {fd} vs {}",
                d.params().flat_owner(i),
                g.params.flat(i)
            );
            checked += 1;
        }
        let mut w = v.clone();
        w[[2, 3, 4]] += eps;
        let up = d.mean_score(&w).unwrap();
        w[[2, 3, 4]] -= 2.0 * eps;
        let down = d.mean_score(&w).unwrap();
        assert!(rel_close((up - down) / (2.0 * eps), g.input[[2, 3, 4]], 1e-3));
    }

    #[test]
    fn direction_gradient_matches_finite_differences() {
        let mut d = Discriminator::new(small(), 10).unwrap();
        let v = noise([8, 8, 8], 11);
        let u = noise([8, 8, 8], 12);
        let phi = |d: &Discriminator| (&d.mean_score_grad(&v).unwrap().input * &u).sum();
        let (hv, dp) = d.direction_grad(&v, &u).unwrap();
        assert!(hv.iter().all(|&x| x == 0.0));
        let eps = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = d.params().num_scalars();
        let mut checked = 0;
        while checked < 10 {
            let i = rng.random_range(0..n);
            let orig = d.params().flat(i);
            d.params_mut().set_flat(i, orig + eps);
            let (up, pu) = (phi(&d), d.activation_pattern(&v).unwrap());
            d.params_mut().set_flat(i, orig - eps);
            let (down, pd) = (phi(&d), d.activation_pattern(&v).unwrap());
            d.params_mut().set_flat(i, orig);
            if pu != pd {
                continue;
            }
            let fd = (up - down) / (2.0 * eps);
            assert!(
                rel_close(fd, dp.flat(i), 1e-3),
                "{}: {fd} vs {}",
                d.params().flat_owner(i),
                dp.flat(i)
            );
            checked += 1;
        }
    }
}
