//! Synthetic paired perfusion / anatomy volumes built from ellipsoids, and
//! the degradation model that turns a clean volume into a noisy
//! low-resolution input.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{downsample, Shape3, Volume3D};

/// Smallest phantom extent per axis.
pub const MIN_PHANTOM_AXIS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ContrastMode {
    /// Both volumes share every edge; only region intensities differ.
    SharedStructure,
    /// A fraction of the anatomical structures has no perfusion
    /// counterpart.
    PartialOverlap { absent_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Rician,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: Shape3,
    /// Voxel size of the high-resolution grid, mm.
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Ellipsoids inside the head; 0 gives constant volumes.
    pub n_ellipsoids: usize,
    pub contrast: ContrastMode,
    pub noise_sigma: f64,
    pub noise: NoiseKind,
    /// Per-axis shrink factor for the low-resolution volume.
    pub downsample_factor: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64, 48, 48],
            spacing: [1.875, 1.875, 2.5],
            seed: 0,
            n_ellipsoids: 10,
            contrast: ContrastMode::SharedStructure,
            noise_sigma: 0.1,
            noise: NoiseKind::Gaussian,
            downsample_factor: [2.0, 2.0, 1.0],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = (0..3).find(|&a| self.shape[a] < MIN_PHANTOM_AXIS) {
            return Err(Error::Config(format!(
                "phantom.shape {:?}: axis {} is below the minimum {MIN_PHANTOM_AXIS}",
                self.shape,
                ["x", "y", "z"][a]
            )));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config(format!(
                "phantom.spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "phantom.noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.downsample_factor.iter().any(|&f| !(f.is_finite() && f >= 1.0)) {
            return Err(Error::Config(format!(
                "phantom.downsample_factor must be >= 1 per axis, got {:?}",
                self.downsample_factor
            )));
        }
        if let ContrastMode::PartialOverlap { absent_fraction } = self.contrast {
            if !(0.0..=1.0).contains(&absent_fraction) {
                return Err(Error::Config(format!(
                    "phantom absent_fraction must lie in [0, 1], got {absent_fraction}"
                )));
            }
        }
        Ok(())
    }

    /// Shape of the degraded volume.
    pub fn low_res_shape(&self) -> Shape3 {
        lr_shape(self.shape, self.downsample_factor)
    }
}

fn lr_shape(shape: Shape3, factor: [f64; 3]) -> Shape3 {
    [0, 1, 2].map(|i| ((shape[i] as f64 / factor[i]).round() as usize).max(1))
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Rotation about the z axis.
    angle: f64,
    asl: f64,
    t1: f64,
    in_asl: bool,
}

impl Ellipsoid {
    /// Point in normalized coordinates `[-1, 1]^3`.
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let (s, c) = self.angle.sin_cos();
        let u = c * d[0] + s * d[1];
        let v = -s * d[0] + c * d[1];
        (u / self.radii[0]).powi(2) + (v / self.radii[1]).powi(2) + (d[2] / self.radii[2]).powi(2) <= 1.0
    }
}

fn ellipsoids(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    let mut out = Vec::with_capacity(spec.n_ellipsoids);
    if spec.n_ellipsoids == 0 {
        return out;
    }
    // a head-sized outer ellipsoid, then smaller structures inside it
    out.push(Ellipsoid {
        center: [0.0; 3],
        radii: [0.85, 0.8, 0.8],
        angle: 0.0,
        asl: 0.3,
        t1: 0.35,
        in_asl: true,
    });
    let absent = match spec.contrast {
        ContrastMode::SharedStructure => 0.0,
        ContrastMode::PartialOverlap { absent_fraction } => absent_fraction,
    };
    let n_inner = spec.n_ellipsoids - 1;
    let n_absent = (absent * n_inner as f64).round() as usize;
    for i in 0..n_inner {
        let radii = [
            rng.random_range(0.12..0.35),
            rng.random_range(0.12..0.35),
            rng.random_range(0.12..0.35),
        ];
        let reach = |r: f64| (0.8 - r).max(0.0);
        let center = [
            rng.random_range(-1.0..=1.0) * reach(radii[0]),
            rng.random_range(-1.0..=1.0) * reach(radii[1]),
            rng.random_range(-1.0..=1.0) * reach(radii[2]),
        ];
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let asl = rng.random_range(0.4..1.0);
        // distinct anatomical levels so every region boundary is an edge
        let t1 = 0.45 + 0.5 * (i + 1) as f64 / (n_inner + 1) as f64;
        out.push(Ellipsoid {
            center,
            radii,
            angle,
            asl,
            t1,
            in_asl: i >= n_absent,
        });
    }
    out
}

/// Clean perfusion volume and its anatomical prior on a shared grid.
/// Intensities lie in `[0, 1]`; later ellipsoids overwrite earlier ones.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume3D, Volume3D)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes = ellipsoids(spec, &mut rng);
    let [nx, ny, nz] = spec.shape;
    let norm = |i: usize, n: usize| 2.0 * i as f64 / (n - 1) as f64 - 1.0;
    let mut asl = Array3::zeros((nx, ny, nz));
    let mut t1 = Array3::zeros((nx, ny, nz));
    for (((i, j, k), a), t) in asl.indexed_iter_mut().zip(t1.iter_mut()) {
        let p = [norm(i, nx), norm(j, ny), norm(k, nz)];
        // structures missing from the perfusion map keep what they cover
        for e in shapes.iter().filter(|e| e.contains(p)) {
            *t = e.t1;
            if e.in_asl {
                *a = e.asl;
            }
        }
    }
    let asl = Volume3D::new(asl, spec.spacing, [0.0; 3])?;
    let t1 = Volume3D::new(t1, spec.spacing, [0.0; 3])?;
    Ok((asl, t1))
}

/// Add i.i.d. noise of standard deviation `sigma` (Gaussian) or take the
/// magnitude of a complex Gaussian perturbation (Rician).
pub fn add_noise<R: Rng + ?Sized>(v: &Volume3D, sigma: f64, kind: NoiseKind, rng: &mut R) -> Result<Volume3D> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let data = match kind {
        NoiseKind::Gaussian => v.data().mapv(|x| x + normal.sample(rng)),
        NoiseKind::Rician => v.data().mapv(|x| {
            let (re, im) = (x + normal.sample(rng), normal.sample(rng));
            (re * re + im * im).sqrt()
        }),
    };
    v.with_data(data)
}

/// Anti-aliased downsample by `factor` per axis, then noise.
pub fn degrade<R: Rng + ?Sized>(
    hr: &Volume3D,
    factor: [f64; 3],
    noise_sigma: f64,
    kind: NoiseKind,
    rng: &mut R,
) -> Result<Volume3D> {
    if factor.iter().any(|&f| !(f.is_finite() && f >= 1.0)) {
        return Err(Error::Config(format!(
            "downsample factor must be >= 1 per axis, got {factor:?}"
        )));
    }
    let target = lr_shape(hr.shape(), factor);
    let lr = if target == hr.shape() {
        hr.clone()
    } else {
        downsample(hr, target)?
    };
    add_noise(&lr, noise_sigma, kind, rng)
}

/// The four volumes of a phantom experiment.
#[derive(Debug, Clone)]
pub struct PhantomSet {
    /// Clean high-resolution perfusion.
    pub hr: Volume3D,
    /// Noisy acquisition on the high-resolution grid.
    pub nr: Volume3D,
    /// Degraded low-resolution training input.
    pub lr: Volume3D,
    pub t1: Volume3D,
}

/// Phantom pair plus its noisy and degraded versions, all from `spec.seed`.
pub fn make_phantom_set(spec: &PhantomSpec) -> Result<PhantomSet> {
    let (hr, t1) = make_phantom(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let nr = add_noise(&hr, spec.noise_sigma, spec.noise, &mut rng)?;
    let lr = degrade(&hr, spec.downsample_factor, spec.noise_sigma, spec.noise, &mut rng)?;
    Ok(PhantomSet { hr, nr, lr, t1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_support(v: &Array3<f64>, thresh: f64) -> Array3<bool> {
        let (nx, ny, nz) = v.dim();
        Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
            let c = v[[i, j, k]];
            let d = |a: usize, b: usize, e: usize| (v[[a, b, e]] - c).abs();
            let mut m = 0.0f64;
            if i + 1 < nx {
                m = m.max(d(i + 1, j, k));
            }
            if j + 1 < ny {
                m = m.max(d(i, j + 1, k));
            }
            if k + 1 < nz {
                m = m.max(d(i, j, k + 1));
            }
            m > thresh
        })
    }

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            shape: [24, 20, 16],
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let (a1, t1) = make_phantom(&small(3)).unwrap();
        let (a2, t2) = make_phantom(&small(3)).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(t1, t2);
        assert_ne!(make_phantom(&small(4)).unwrap().0, a1);
    }

    #[test]
    fn intensities_bounded() {
        let (a, t) = make_phantom(&small(1)).unwrap();
        for v in a.data().iter().chain(t.data().iter()) {
            assert!((0.0..=1.0).contains(v));
        }
        assert!(a.min_max().1 > a.min_max().0);
    }

    #[test]
    fn shared_structure_edges_nest() {
        let (a, t) = make_phantom(&small(5)).unwrap();
        let ga = gradient_support(a.data(), 1e-9);
        let gt = gradient_support(t.data(), 1e-9);
        assert!(ga.iter().any(|&b| b));
        assert!(ga.iter().zip(gt.iter()).all(|(&ea, &et)| !ea || et));
    }

    #[test]
    fn partial_overlap_drops_structures() {
        let spec = PhantomSpec {
            contrast: ContrastMode::PartialOverlap { absent_fraction: 0.5 },
            ..small(5)
        };
        let (a, t) = make_phantom(&spec).unwrap();
        let ga = gradient_support(a.data(), 1e-9);
        let gt = gradient_support(t.data(), 1e-9);
        let only_t1 = ga.iter().zip(gt.iter()).filter(|(&ea, &et)| et && !ea).count();
        assert!(only_t1 > 0);
    }

    #[test]
    fn no_ellipsoids_means_constant() {
        let (a, t) = make_phantom(&PhantomSpec {
            n_ellipsoids: 0,
            ..small(0)
        })
        .unwrap();
        assert!(a.data().iter().all(|&v| v == a.data()[[0, 0, 0]]));
        assert!(t.data().iter().all(|&v| v == t.data()[[0, 0, 0]]));
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(matches!(
            make_phantom(&PhantomSpec {
                shape: [8, 8, 8],
                ..small(0)
            }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degrade_contract() {
        let hr = Volume3D::filled([128, 96, 48], 0.5, [1.875, 1.875, 2.5], [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lr = degrade(&hr, [2.0, 2.0, 1.0], 0.0, NoiseKind::Gaussian, &mut rng).unwrap();
        assert_eq!(lr.shape(), [64, 48, 48]);
        assert_eq!(lr.spacing(), [3.75, 3.75, 2.5]);
        assert_eq!(degrade(&hr, [1.0; 3], 0.0, NoiseKind::Gaussian, &mut rng).unwrap(), hr);

        let c = Volume3D::filled([32, 32, 32], 0.5, [1.0; 3], [0.0; 3]).unwrap();
        let noisy = degrade(&c, [1.0; 3], 0.1, NoiseKind::Gaussian, &mut rng).unwrap();
        let m = noisy.mean();
        let sd = (noisy.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / noisy.num_voxels() as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.01, "{sd}");
    }

    #[test]
    fn rician_noise_is_non_negative() {
        let c = Volume3D::filled([16, 16, 16], 0.0, [1.0; 3], [0.0; 3]).unwrap();
        let n = add_noise(&c, 0.2, NoiseKind::Rician, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(n.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn set_shares_geometry() {
        let s = make_phantom_set(&small(2)).unwrap();
        assert_eq!(s.lr.shape(), [12, 10, 16]);
        for (a, b) in [(&s.hr, &s.t1), (&s.hr, &s.nr)] {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.spacing(), b.spacing());
        }
        for i in 0..3 {
            assert!((s.lr.extent()[i] - s.hr.extent()[i]).abs() < 1e-9);
            assert_eq!(s.lr.origin(), s.hr.origin());
        }
    }
}
