//! Progressive coarse-to-fine adversarial training of the generator pyramid.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{critic_loss, total_generator_loss, GaussianFilterSpec, LossWeights};
use crate::nn::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, Checkpoint, Critic, Discriminator, DiscriminatorSpec,
    Generator, GeneratorSpec, NetworkKind,
};
use crate::pyramid::{build_pyramid, PyramidConfig, ScalePyramid};
use crate::volume::{resample_grid, NormMode, NormParams, ResampleMethod, Shape3, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Generator updates per scale.
    pub epochs_per_scale: usize,
    pub adam_betas: [f64; 2],
    pub seed: u64,
    /// Standard deviation of the scale-0 noise input, in normalized units.
    pub noise_sigma0: f64,
    /// Rewrite the running scale's checkpoint every this many epochs; 0
    /// writes only when a scale finishes.
    pub checkpoint_every: usize,
    /// Compute device; only `cpu` exists.
    pub device: String,
    /// Initialize each critic from the previous scale's critic.
    pub inherit_discriminator: bool,
    /// Emit a progress line every this many epochs (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs_per_scale: 2000,
            adam_betas: [0.5, 0.999],
            seed: 0,
            noise_sigma0: 1.0,
            checkpoint_every: 0,
            device: "cpu".into(),
            inherit_discriminator: true,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.epochs_per_scale == 0 {
            return Err(Error::Config("train.epochs_per_scale must be at least 1".into()));
        }
        let [b1, b2] = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!(
                "train.adam_betas must lie in [0, 1), got {b1}, {b2}"
            )));
        }
        if !(self.noise_sigma0.is_finite() && self.noise_sigma0 > 0.0) {
            return Err(Error::Config(format!(
                "train.noise_sigma0 must be > 0, got {}",
                self.noise_sigma0
            )));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!(
                "train.device `{}` is not available; use `cpu`",
                self.device
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            ..AdamConfig::default()
        }
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub pyramid: PyramidConfig,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub loss: LossWeights,
    pub filter: GaussianFilterSpec,
    pub train: TrainConfig,
    pub normalization: NormMode,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()?;
        self.filter.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub scale: usize,
    /// 1-based.
    pub epoch: usize,
    pub critic: f64,
    pub wasserstein: f64,
    pub gradient_penalty: f64,
    pub adversarial: f64,
    pub mse: f64,
    pub lowpass: f64,
    pub total: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Effective settings and scale plan.
    pub header: serde_json::Value,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn for_scale(&self, scale: usize) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.scale == scale)
    }

    /// JSON lines: a header object, then one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({ "header": self.header }).to_string();
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::Config(format!("train log: {e}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first: serde_json::Value = serde_json::from_str(lines.next().unwrap_or("{}")).map_err(bad)?;
        let header = first.get("header").cloned().unwrap_or(serde_json::Value::Null);
        let records = lines
            .map(|l| serde_json::from_str(l).map_err(bad))
            .collect::<Result<_>>()?;
        Ok(Self { header, records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

pub fn checkpoint_name(scale: usize) -> String {
    format!("generator_{scale}.ckpt")
}

pub fn critic_checkpoint_name(scale: usize) -> String {
    format!("discriminator_{scale}.ckpt")
}

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    num_scales: usize,
    shapes: Vec<Shape3>,
    pyramid: PyramidConfig,
    asl_norm: NormParams,
    prior_norm: NormParams,
    seed: u64,
    settings: TrainSettings,
}

/// Frozen generators `G_0 .. G_N` plus what generation needs to reuse them.
#[derive(Debug, Clone)]
pub struct TrainedPyramid {
    pub generators: Vec<Generator>,
    pub shapes: Vec<Shape3>,
    pub asl_norm: NormParams,
    pub prior_norm: NormParams,
    pub seed: u64,
    pub settings: TrainSettings,
}

impl TrainedPyramid {
    pub fn num_scales(&self) -> usize {
        self.generators.len()
    }

    pub fn finest(&self) -> &Generator {
        self.generators.last().expect("at least one scale")
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            num_scales: self.shapes.len(),
            shapes: self.shapes.clone(),
            pyramid: self.settings.pyramid.clone(),
            asl_norm: self.asl_norm,
            prior_norm: self.prior_norm,
            seed: self.seed,
            settings: self.settings.clone(),
        }
    }

    /// Write `manifest.json` and one checkpoint per trained generator.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_manifest(dir, &self.manifest())?;
        for (n, g) in self.generators.iter().enumerate() {
            save_checkpoint(&generator_checkpoint(g), dir.join(checkpoint_name(n)))?;
        }
        Ok(())
    }

    /// Load a pyramid; every scale listed in the manifest must be present.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let missing: Vec<String> = (0..m.num_scales)
            .filter(|&n| !dir.join(checkpoint_name(n)).is_file())
            .map(|n| n.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Corrupt {
                path: dir.to_path_buf(),
                reason: format!(
                    "incomplete pyramid: missing checkpoints for scales {} of {}",
                    missing.join(", "),
                    m.num_scales
                ),
            });
        }
        let mut generators = Vec::with_capacity(m.num_scales);
        for n in 0..m.num_scales {
            let p = dir.join(checkpoint_name(n));
            let ck = load_checkpoint(&p)?;
            let corrupt = |reason: String| Error::Corrupt {
                path: p.clone(),
                reason,
            };
            if ck.kind != NetworkKind::Generator {
                return Err(corrupt("not a generator checkpoint".into()));
            }
            let spec: GeneratorSpec = serde_json::from_value(ck.spec).map_err(|e| corrupt(e.to_string()))?;
            let g = Generator::from_params(spec, ck.seed, ck.params).map_err(|e| corrupt(e.to_string()))?;
            generators.push(g);
        }
        Ok(Self {
            generators,
            shapes: m.shapes,
            asl_norm: m.asl_norm,
            prior_norm: m.prior_norm,
            seed: m.seed,
            settings: m.settings,
        })
    }
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn generator_checkpoint(g: &Generator) -> Checkpoint {
    Checkpoint {
        kind: NetworkKind::Generator,
        spec: serde_json::to_value(g.spec()).expect("spec serializes"),
        seed: g.seed(),
        params: g.params().clone(),
    }
}

fn critic_checkpoint(d: &Discriminator) -> Checkpoint {
    Checkpoint {
        kind: NetworkKind::Discriminator,
        spec: serde_json::to_value(d.spec()).expect("spec serializes"),
        seed: d.seed(),
        params: d.params().clone(),
    }
}

/// I.i.d. `N(0, sigma^2)` voxels with unit spacing.
pub fn sample_noise<R: Rng + ?Sized>(shape: Shape3, sigma: f64, rng: &mut R) -> Result<Volume3D> {
    Volume3D::from_data(noise_grid(shape, sigma, rng)?)
}

fn noise_grid<R: Rng + ?Sized>(shape: Shape3, sigma: f64, rng: &mut R) -> Result<Array3<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!("noise sigma must be > 0, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Ok(Array3::from_shape_simple_fn(shape, || normal.sample(rng)))
}

/// Input to generator `n` for one training iteration: fresh noise at scale
/// 0, otherwise the upsampled output of the frozen cascade below `n`.
fn cascade_input<R: Rng + ?Sized>(
    frozen: &[Generator],
    pyramid: &ScalePyramid,
    n: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Array3<f64>> {
    let z0 = noise_grid(pyramid.shapes()[0], noise_sigma, rng)?;
    if n == 0 {
        return Ok(z0);
    }
    let x = run_cascade(&frozen[..n], pyramid, z0)?;
    Ok(resample_grid(&x, pyramid.shapes()[n], ResampleMethod::Linear))
}

fn run_cascade(generators: &[Generator], pyramid: &ScalePyramid, z0: Array3<f64>) -> Result<Array3<f64>> {
    let mut x = z0;
    for (k, g) in generators.iter().enumerate() {
        let shape = pyramid.shapes()[k];
        if k > 0 {
            x = resample_grid(&x, shape, ResampleMethod::Linear);
        }
        if x.shape() != shape {
            return Err(Error::Geometry(format!(
                "cascade input {:?} does not match scale {k} shape {shape:?}",
                x.shape()
            )));
        }
        x = g.forward(&x, pyramid.level(k).a.data())?;
    }
    Ok(x)
}

/// Run `G_0 .. G_n` from a fresh noise draw and return the scale-`n` output.
pub fn forward_cascade<R: Rng + ?Sized>(
    generators: &[Generator],
    pyramid: &ScalePyramid,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Array3<f64>> {
    if generators.is_empty() || generators.len() > pyramid.num_scales() {
        return Err(Error::Geometry(format!(
            "{} generators for a {}-scale pyramid",
            generators.len(),
            pyramid.num_scales()
        )));
    }
    let z0 = noise_grid(pyramid.shapes()[0], noise_sigma, rng)?;
    run_cascade(generators, pyramid, z0)
}

fn finite(v: f64, scale: usize, epoch: usize, term: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { scale, epoch, term })
    }
}

/// Hook for writing mid-scale checkpoints.
type Snapshot<'a> = dyn FnMut(&Generator, &Discriminator) -> Result<()> + 'a;

/// Train one scale in place. `g` and `d` arrive already initialized
/// (possibly inherited); `frozen` holds the trained generators below `n`.
#[allow(clippy::too_many_arguments)]
pub fn train_scale<R: Rng + ?Sized>(
    n: usize,
    pyramid: &ScalePyramid,
    frozen: &[Generator],
    g: &mut Generator,
    d: &mut Discriminator,
    settings: &TrainSettings,
    rng: &mut R,
    snapshot: Option<&mut Snapshot<'_>>,
) -> Result<Vec<EpochRecord>> {
    settings.validate()?;
    if frozen.len() != n {
        return Err(Error::Config(format!(
            "scale {n} needs {n} frozen generators, got {}",
            frozen.len()
        )));
    }
    let cfg = &settings.train;
    let weights = &settings.loss;
    let level = pyramid.level(n);
    let (target, prior) = (level.x.data(), level.a.data());
    let mut opt_g = Adam::new(cfg.adam(), g.params());
    let mut opt_d = Adam::new(cfg.adam(), d.params());
    let mut snapshot = snapshot;
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs_per_scale);
    for epoch in 1..=cfg.epochs_per_scale {
        let input = cascade_input(frozen, pyramid, n, cfg.noise_sigma0, rng)?;
        let pass = g.forward_train(&input, prior)?;
        let fake = pass.output();
        finite(fake.iter().fold(0.0, |a, &v| a + v), n, epoch, "generator output")?;

        let mut critic = None;
        for _ in 0..weights.d_steps_per_g {
            let cl = critic_loss(d, target, fake, weights.lambda_gp, rng)?;
            finite(cl.total, n, epoch, "critic loss")?;
            opt_d.update(d.params_mut(), &cl.params_grad);
            critic = Some(cl);
        }
        let critic = critic.expect("at least one critic step");

        let gl = total_generator_loss(d, fake, target, weights, &settings.filter)?;
        finite(gl.adversarial, n, epoch, "adversarial loss")?;
        finite(gl.mse, n, epoch, "mse loss")?;
        finite(gl.lowpass, n, epoch, "lowpass loss")?;
        finite(gl.total, n, epoch, "generator loss")?;
        let (grads, _) = pass.backward(&gl.grad);
        drop(pass);
        opt_g.update(g.params_mut(), &grads);
        if !g.params().all_finite() {
            return Err(Error::NonFinite {
                scale: n,
                epoch,
                term: "generator parameters",
            });
        }

        let rec = EpochRecord {
            scale: n,
            epoch,
            critic: critic.total,
            wasserstein: critic.wasserstein,
            gradient_penalty: critic.penalty,
            adversarial: gl.adversarial,
            mse: gl.mse,
            lowpass: gl.lowpass,
            total: gl.total,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        if cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch == 1) {
            log::info!(
                "scale {n} epoch {epoch}/{}: critic {:.4} adv {:.4} mse {:.5} lp {:.5} ({:.1}s)",
                cfg.epochs_per_scale,
                rec.critic,
                rec.adversarial,
                rec.mse,
                rec.lowpass,
                rec.elapsed_s
            );
        }
        records.push(rec);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs_per_scale {
            if let Some(f) = snapshot.as_deref_mut() {
                f(g, d)?;
            }
        }
    }
    Ok(records)
}

/// Train all scales coarse to fine. When `out_dir` is given, checkpoints,
/// the manifest and the log are written there as scales complete, so an
/// aborted run keeps the scales it finished.
pub fn train_pyramid(
    x: &Volume3D,
    a: &Volume3D,
    settings: &TrainSettings,
    out_dir: Option<&Path>,
) -> Result<(TrainedPyramid, TrainLog)> {
    settings.validate()?;
    let (xn, asl_norm) = crate::volume::normalize(x, settings.normalization)?;
    let (an, prior_norm) = crate::volume::normalize(a, settings.normalization)?;
    let pyramid = build_pyramid(&xn, &an, &settings.pyramid)?;
    let shapes = pyramid.shapes().to_vec();
    let min = settings.discriminator.min_input_extent();
    if let Some(s) = shapes.iter().find(|s| s.iter().any(|&e| e < min)) {
        return Err(Error::Config(format!(
            "scale shape {s:?} is below the critic's minimum extent {min}"
        )));
    }
    let seed = settings.train.seed;
    let header = serde_json::json!({
        "settings": settings,
        "shapes": shapes,
        "asl_norm": asl_norm,
        "prior_norm": prior_norm,
    });
    let mut log = TrainLog {
        header,
        records: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut generators: Vec<Generator> = Vec::with_capacity(shapes.len());
    let mut critic_prev: Option<Discriminator> = None;
    let manifest = Manifest {
        num_scales: shapes.len(),
        shapes: shapes.clone(),
        pyramid: settings.pyramid.clone(),
        asl_norm,
        prior_norm,
        seed,
        settings: settings.clone(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_manifest(dir, &manifest)?;
    }
    log::info!("training {} scales: {:?}", shapes.len(), shapes);
    for n in 0..shapes.len() {
        let mut g = Generator::new(settings.generator.clone(), seed.wrapping_add(n as u64))?;
        // scale 0 refines pure noise, so there is nothing to add back
        g.set_residual(n > 0 && settings.generator.residual);
        if let Some(parent) = generators.last() {
            g.inherit_params(parent.params())?;
        }
        let mut d = Discriminator::new(settings.discriminator.clone(), seed.wrapping_add(1000 + n as u64))?;
        if let (true, Some(parent)) = (settings.train.inherit_discriminator, critic_prev.as_ref()) {
            d.inherit_params(parent.params())?;
        }
        let ckpt_paths: Option<(PathBuf, PathBuf)> =
            out_dir.map(|dir| (dir.join(checkpoint_name(n)), dir.join(critic_checkpoint_name(n))));
        let mut snap = |g: &Generator, d: &Discriminator| -> Result<()> {
            if let Some((gp, dp)) = &ckpt_paths {
                save_checkpoint(&generator_checkpoint(g), gp)?;
                save_checkpoint(&critic_checkpoint(d), dp)?;
            }
            Ok(())
        };
        let result = train_scale(
            n,
            &pyramid,
            &generators,
            &mut g,
            &mut d,
            settings,
            &mut rng,
            Some(&mut snap),
        );
        let records = match result {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = out_dir {
                    // keep whatever finished; the failing scale is not saved
                    let _ = log.write(dir.join(TRAIN_LOG));
                }
                return Err(e);
            }
        };
        log.records.extend(records);
        snap(&g, &d)?;
        if let Some(dir) = out_dir {
            log.write(dir.join(TRAIN_LOG))?;
        }
        generators.push(g);
        critic_prev = Some(d);
    }
    let trained = TrainedPyramid {
        generators,
        shapes,
        asl_norm,
        prior_norm,
        seed,
        settings: settings.clone(),
    };
    Ok((trained, log))
}
