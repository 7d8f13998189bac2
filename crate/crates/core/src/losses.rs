//! Training objectives: WGAN-GP critic loss, adversarial generator term,
//! MSE and Gaussian low-pass reconstruction terms, all with gradients.
//!
//! Reconstruction terms are means over voxels, so their weights do not
//! depend on the grid size.

use ndarray::{Array3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{default_radius, gaussian_kernel, smooth_isotropic, smooth_isotropic_adjoint};
use crate::nn::{Critic, CriticGrad, ParamSet};
use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// MSE weight.
    pub alpha: f64,
    /// Low-pass weight.
    pub beta: f64,
    pub lambda_gp: f64,
    /// Critic updates per generator update.
    pub d_steps_per_g: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 10.0,
            lambda_gp: 10.0,
            d_steps_per_g: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_gp", self.lambda_gp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.d_steps_per_g == 0 {
            return Err(Error::Config("loss.d_steps_per_g must be at least 1".into()));
        }
        Ok(())
    }
}

/// Separable Gaussian with replicate boundaries; `sigma` in voxels of the
/// grid it is applied to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianFilterSpec {
    pub sigma: f64,
    /// Truncation radius; `ceil(3 sigma)` when absent.
    pub radius: Option<usize>,
}

impl Default for GaussianFilterSpec {
    fn default() -> Self {
        Self {
            sigma: 5.0,
            radius: None,
        }
    }
}

impl GaussianFilterSpec {
    pub fn with_sigma(sigma: f64) -> Self {
        Self { sigma, radius: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("filter.sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.radius.unwrap_or_else(|| default_radius(self.sigma))
    }

    /// Normalized 1D taps, identical on every axis.
    pub fn taps(&self) -> Vec<f64> {
        gaussian_kernel(self.sigma, self.radius())
    }
}

fn same_shape(a: &Array3<f64>, b: &Array3<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Geometry(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn lowpass_grid(data: &Array3<f64>, spec: &GaussianFilterSpec) -> Array3<f64> {
    smooth_isotropic(data, &spec.taps())
}

pub fn gaussian_lowpass(v: &Volume3D, spec: &GaussianFilterSpec) -> Result<Volume3D> {
    spec.validate()?;
    v.with_data(lowpass_grid(v.data(), spec))
}

/// Mean squared difference.
pub fn mse_loss(gen: &Array3<f64>, target: &Array3<f64>) -> Result<f64> {
    Ok(mse_loss_grad(gen, target)?.0)
}

/// MSE and its gradient with respect to `gen`.
pub fn mse_loss_grad(gen: &Array3<f64>, target: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    same_shape(gen, target, "mse")?;
    let n = gen.len() as f64;
    let diff = gen - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// MSE between low-passed volumes.
pub fn lowpass_loss(gen: &Array3<f64>, target: &Array3<f64>, spec: &GaussianFilterSpec) -> Result<f64> {
    Ok(lowpass_loss_grad(gen, target, spec)?.0)
}

pub fn lowpass_loss_grad(
    gen: &Array3<f64>,
    target: &Array3<f64>,
    spec: &GaussianFilterSpec,
) -> Result<(f64, Array3<f64>)> {
    same_shape(gen, target, "lowpass")?;
    spec.validate()?;
    let taps = spec.taps();
    // the filter is linear, so filter the difference once
    let r = smooth_isotropic(&(gen - target), &taps);
    let n = gen.len() as f64;
    let loss = r.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = smooth_isotropic_adjoint(&(r * (2.0 / n)), &taps);
    Ok((loss, grad))
}

/// Critic objective with its parts and gradients.
#[derive(Debug, Clone)]
pub struct CriticLoss {
    pub total: f64,
    /// `mean D(fake) - mean D(real)`.
    pub wasserstein: f64,
    pub penalty: f64,
    /// Norm of the input gradient of the summed score map at the
    /// interpolate.
    pub grad_norm: f64,
    /// Interpolation weight on `real`.
    pub epsilon: f64,
    pub params_grad: ParamSet,
    pub real_grad: Array3<f64>,
    pub fake_grad: Array3<f64>,
}

/// WGAN-GP critic loss with one interpolate per call; `epsilon` is drawn
/// uniformly from `rng`.
///
/// The Wasserstein terms average the score map. The penalty constrains the
/// gradient of its sum, so every patch score is held to unit slope rather
/// than their average.
pub fn critic_loss<C: Critic + ?Sized, R: Rng + ?Sized>(
    critic: &C,
    real: &Array3<f64>,
    fake: &Array3<f64>,
    lambda_gp: f64,
    rng: &mut R,
) -> Result<CriticLoss> {
    let epsilon: f64 = rng.random();
    critic_loss_at(critic, real, fake, lambda_gp, epsilon)
}

/// [`critic_loss`] with a fixed interpolation weight.
pub fn critic_loss_at<C: Critic + ?Sized>(
    critic: &C,
    real: &Array3<f64>,
    fake: &Array3<f64>,
    lambda_gp: f64,
    epsilon: f64,
) -> Result<CriticLoss> {
    same_shape(real, fake, "critic loss")?;
    let gr = critic.mean_score_grad(real)?;
    let gf = critic.mean_score_grad(fake)?;
    let wasserstein = gf.mean_score - gr.mean_score;
    let mut params_grad = gf.params;
    params_grad.add_scaled(-1.0, &gr.params);
    let mut real_grad = gr.input.mapv(|v| -v);
    let mut fake_grad = gf.input;

    let mut hat = real * epsilon;
    hat.scaled_add(1.0 - epsilon, fake);
    let CriticGrad { input: g, cells, .. } = critic.mean_score_grad(&hat)?;
    let mean_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let grad_norm = cells as f64 * mean_norm;
    let penalty = lambda_gp * (grad_norm - 1.0).powi(2);
    if mean_norm > 0.0 && lambda_gp > 0.0 {
        let u = g / mean_norm;
        let (hv, dp) = critic.direction_grad(&hat, &u)?;
        let c = 2.0 * lambda_gp * (grad_norm - 1.0) * cells as f64;
        params_grad.add_scaled(c, &dp);
        real_grad.scaled_add(c * epsilon, &hv);
        fake_grad.scaled_add(c * (1.0 - epsilon), &hv);
    }
    Ok(CriticLoss {
        total: wasserstein + penalty,
        wasserstein,
        penalty,
        grad_norm,
        epsilon,
        params_grad,
        real_grad,
        fake_grad,
    })
}

/// `-mean D(fake)` and its gradient with respect to `fake`.
pub fn generator_adv_loss<C: Critic + ?Sized>(critic: &C, fake: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    let g = critic.mean_score_grad(fake)?;
    Ok((-g.mean_score, g.input.mapv(|v| -v)))
}

#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    pub total: f64,
    pub adversarial: f64,
    pub mse: f64,
    pub lowpass: f64,
    /// Gradient of `total` with respect to the generated volume.
    pub grad: Array3<f64>,
}

/// `adv + alpha * mse + beta * lowpass`.
pub fn total_generator_loss<C: Critic + ?Sized>(
    critic: &C,
    gen: &Array3<f64>,
    target: &Array3<f64>,
    weights: &LossWeights,
    filter: &GaussianFilterSpec,
) -> Result<GeneratorLoss> {
    let (adversarial, mut grad) = generator_adv_loss(critic, gen)?;
    let (mse, gm) = mse_loss_grad(gen, target)?;
    let (lowpass, gl) = lowpass_loss_grad(gen, target, filter)?;
    grad.scaled_add(weights.alpha, &gm);
    grad.scaled_add(weights.beta, &gl);
    Ok(GeneratorLoss {
        total: adversarial + weights.alpha * mse + weights.beta * lowpass,
        adversarial,
        mse,
        lowpass,
        grad,
    })
}

/// Fixed linear critic `D(v) = sum(w * v)` with a single score cell.
#[derive(Debug, Clone)]
pub struct LinearCritic {
    pub weights: Array3<f64>,
    empty: ParamSet,
}

impl LinearCritic {
    pub fn new(weights: Array3<f64>) -> Self {
        Self {
            weights,
            empty: ParamSet::new(),
        }
    }

    /// `D(v) = mean(v)` on grids of `shape`.
    pub fn mean(shape: (usize, usize, usize)) -> Self {
        let n = (shape.0 * shape.1 * shape.2) as f64;
        Self::new(Array3::from_elem(shape, 1.0 / n))
    }
}

impl Critic for LinearCritic {
    fn scores(&self, v: &Array3<f64>) -> Result<Array3<f64>> {
        same_shape(v, &self.weights, "linear critic")?;
        let s = Zip::from(v).and(&self.weights).fold(0.0, |acc, &a, &w| acc + a * w);
        Ok(Array3::from_elem((1, 1, 1), s))
    }

    fn mean_score_grad(&self, v: &Array3<f64>) -> Result<CriticGrad> {
        let mean_score = self.scores(v)?[[0, 0, 0]];
        Ok(CriticGrad {
            mean_score,
            input: self.weights.clone(),
            params: ParamSet::new(),
            cells: 1,
        })
    }

    fn direction_grad(&self, v: &Array3<f64>, _u: &Array3<f64>) -> Result<(Array3<f64>, ParamSet)> {
        Ok((Array3::zeros(v.raw_dim()), ParamSet::new()))
    }

    fn params(&self) -> &ParamSet {
        &self.empty
    }
}

/// The critic that scores everything zero.
#[derive(Debug, Clone, Default)]
pub struct ZeroCritic {
    empty: ParamSet,
}

impl Critic for ZeroCritic {
    fn scores(&self, _v: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(Array3::zeros((1, 1, 1)))
    }

    fn mean_score_grad(&self, v: &Array3<f64>) -> Result<CriticGrad> {
        Ok(CriticGrad {
            mean_score: 0.0,
            input: Array3::zeros(v.raw_dim()),
            params: ParamSet::new(),
            cells: 1,
        })
    }

    fn direction_grad(&self, v: &Array3<f64>, _u: &Array3<f64>) -> Result<(Array3<f64>, ParamSet)> {
        Ok((Array3::zeros(v.raw_dim()), ParamSet::new()))
    }

    fn params(&self) -> &ParamSet {
        &self.empty
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
    }

    fn checkerboard(n: usize) -> Array3<f64> {
        Array3::from_shape_fn((n, n, n), |(i, j, k)| if (i + j + k) % 2 == 0 { 1.0 } else { -1.0 })
    }

    #[test]
    fn filter_preserves_constants() {
        let c = Array3::from_elem((9, 10, 11), 3.5);
        for sigma in [0.5, 2.0, 5.0] {
            let out = lowpass_grid(&c, &GaussianFilterSpec::with_sigma(sigma));
            assert!(out.iter().all(|&v| (v - 3.5).abs() < 1e-12));
        }
    }

    #[test]
    fn impulse_response_is_the_separable_kernel() {
        let mut v = Array3::zeros((31, 31, 31));
        v[[15, 15, 15]] = 1.0;
        let spec = GaussianFilterSpec::with_sigma(2.0);
        let out = lowpass_grid(&v, &spec);
        // independent oracle: analytic Gaussian, normalized over the radius
        let r = 6;
        let g = |k: f64| (-k * k / 8.0).exp();
        let z: f64 = (-r..=r).map(|k| g(k as f64)).sum();
        let w0 = 1.0 / z;
        let w1 = g(1.0) / z;
        assert!((out[[15, 15, 15]] - w0.powi(3)).abs() < 1e-12);
        assert!((out[[16, 15, 15]] - w1 * w0 * w0).abs() < 1e-12);
    }

    #[test]
    fn white_noise_variance_collapses() {
        let v = noise((32, 32, 32), 1);
        let out = lowpass_grid(&v, &GaussianFilterSpec::default());
        let var = |a: &Array3<f64>| {
            let m = a.mean().unwrap();
            a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / a.len() as f64
        };
        assert!(var(&out) < 0.02 * var(&v), "{} vs {}", var(&out), var(&v));
    }

    #[test]
    fn mse_examples() {
        let t = noise((4, 4, 4), 2);
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        assert!((mse_loss(&(&t + 1.0), &t).unwrap() - 1.0).abs() < 1e-12);
        let g = noise((4, 4, 4), 3);
        let direct: f64 = g.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 64.0;
        assert!((mse_loss(&g, &t).unwrap() - direct).abs() < 1e-7);
        assert!(matches!(mse_loss(&g, &noise((4, 4, 5), 0)), Err(Error::Geometry(_))));
    }

    #[test]
    fn lowpass_examples() {
        let t = noise((16, 16, 16), 4);
        let spec = GaussianFilterSpec::default();
        assert_eq!(lowpass_loss(&t, &t, &spec).unwrap(), 0.0);
        assert!((lowpass_loss(&(&t + 1.0), &t, &spec).unwrap() - 1.0).abs() < 1e-12);
        let gen = &t + &checkerboard(16);
        let lp = lowpass_loss(&gen, &t, &spec).unwrap();
        assert!(lp < 0.02 * mse_loss(&gen, &t).unwrap(), "{lp}");
    }

    #[test]
    fn lowpass_never_exceeds_mse_on_random_pairs() {
        let spec = GaussianFilterSpec::with_sigma(1.5);
        for s in 0..20 {
            let (a, b) = (noise((8, 9, 10), 100 + s), noise((8, 9, 10), 200 + s));
            assert!(lowpass_loss(&a, &b, &spec).unwrap() <= mse_loss(&a, &b).unwrap());
        }
    }

    #[test]
    fn penalty_for_the_mean_critic() {
        let v = noise((4, 4, 4), 5);
        let d = LinearCritic::mean((4, 4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = critic_loss(&d, &v, &v, 10.0, &mut rng).unwrap();
        let expected = 10.0 * (1.0 / 8.0 - 1.0f64).powi(2);
        assert!((expected - 7.65625).abs() < 1e-12);
        assert!(l.wasserstein.abs() < 1e-12);
        assert!((l.total - expected).abs() < 1e-9);
    }

    #[test]
    fn zero_critic_examples() {
        let v = noise((4, 4, 4), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = critic_loss(&ZeroCritic::default(), &v, &(&v + 1.0), 3.0, &mut rng).unwrap();
        assert_eq!(l.wasserstein, 0.0);
        assert_eq!(l.total, 3.0);
        assert_eq!(generator_adv_loss(&ZeroCritic::default(), &v).unwrap().0, 0.0);
    }

    #[test]
    fn unit_gradient_critic_has_no_penalty() {
        let mut w = noise((4, 4, 4), 7);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w /= norm;
        let v = noise((4, 4, 4), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = critic_loss(&LinearCritic::new(w), &v, &v, 10.0, &mut rng).unwrap();
        assert!(l.total.abs() < 1e-6);
    }

    #[test]
    fn seeded_epsilon_is_reproducible() {
        let d = LinearCritic::mean((4, 4, 4));
        let (a, b) = (noise((4, 4, 4), 9), noise((4, 4, 4), 10));
        let run = || critic_loss(&d, &a, &b, 10.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (x, y) = (run(), run());
        assert_eq!(x.total, y.total);
        assert_eq!(x.epsilon, y.epsilon);
    }

    #[test]
    fn generator_terms() {
        let d = LinearCritic::mean((4, 4, 4));
        let fake = Array3::from_elem((4, 4, 4), 2.0);
        let (adv, grad) = generator_adv_loss(&d, &fake).unwrap();
        assert!((adv + 2.0).abs() < 1e-12);
        assert!(grad.iter().all(|&g| (g + 1.0 / 64.0).abs() < 1e-15));

        let t = noise((8, 8, 8), 11);
        let spec = GaussianFilterSpec::default();
        let zero = ZeroCritic::default();
        let only_adv = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        let g = noise((8, 8, 8), 12);
        assert_eq!(
            total_generator_loss(&d_for(&g), &g, &t, &only_adv, &spec)
                .unwrap()
                .total,
            generator_adv_loss(&d_for(&g), &g).unwrap().0
        );
        assert_eq!(
            total_generator_loss(&zero, &t, &t, &LossWeights::default(), &spec)
                .unwrap()
                .total,
            0.0
        );
        let unit = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            ..Default::default()
        };
        let l = total_generator_loss(&zero, &(&t + 1.0), &t, &unit, &spec).unwrap();
        assert!((l.total - 2.0).abs() < 1e-9);
    }

    fn d_for(v: &Array3<f64>) -> LinearCritic {
        LinearCritic::mean(v.dim())
    }

    #[test]
    fn reconstruction_gradients_match_finite_differences() {
        let g = noise((8, 8, 8), 13);
        let t = noise((8, 8, 8), 14);
        let spec = GaussianFilterSpec::with_sigma(1.0);
        let weights = LossWeights::default();
        let d = LinearCritic::new(noise((8, 8, 8), 15));
        let an = total_generator_loss(&d, &g, &t, &weights, &spec).unwrap().grad;
        let eps = 1e-3;
        for idx in [[0, 0, 0], [3, 4, 5], [7, 7, 2]] {
            let mut p = g.clone();
            p[idx] += eps;
            let up = total_generator_loss(&d, &p, &t, &weights, &spec).unwrap().total;
            p[idx] -= 2.0 * eps;
            let down = total_generator_loss(&d, &p, &t, &weights, &spec).unwrap().total;
            let fd = (up - down) / (2.0 * eps);
            assert!(
                (fd - an[idx]).abs() <= 1e-3 * fd.abs().max(1e-8),
                "{idx:?}: {fd} vs {}",
                an[idx]
            );
        }
    }

    #[test]
    fn filter_is_linear() {
        let (u, w) = (noise((8, 8, 8), 16), noise((8, 8, 8), 17));
        let spec = GaussianFilterSpec::with_sigma(2.0);
        let lhs = lowpass_grid(&(&u * 2.0 - &w * 0.5), &spec);
        let rhs = lowpass_grid(&u, &spec) * 2.0 - lowpass_grid(&w, &spec) * 0.5;
        assert!(lhs.iter().zip(rhs.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
