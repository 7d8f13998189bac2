//! Run configuration: one TOML tree, `--set key=value` overrides applied to
//! the tree, then explicit flags on the typed struct.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use aslsr_core::{
    DiscriminatorSpec, Error, GaussianFilterSpec, GeneratorSpec, LossWeights, MetricsOptions, NormMode, PhantomSpec,
    PyramidConfig, ResampleMethod, Result, Shape3, SrTarget, TrainConfig, TrainSettings,
};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Environment variable that selects the compute device.
pub const DEVICE_ENV: &str = "ASLSR_DEVICE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Low-resolution ASL volume.
    pub asl_lr: Option<PathBuf>,
    /// Anatomical prior, registered to the ASL volume.
    pub t1: Option<PathBuf>,
    pub output: PathBuf,
    /// Trained pyramid directory; `output` when absent.
    pub checkpoints: Option<PathBuf>,
    /// Extension of written volumes: `nii`, `nii.gz` or `raw`.
    pub volume_format: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            asl_lr: None,
            t1: None,
            output: PathBuf::from("out"),
            checkpoints: None,
            volume_format: "nii.gz".into(),
        }
    }
}

/// `"match-t1"` or an explicit `[nx, ny, nz]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    Shape(Shape3),
    Named(String),
}

impl TargetSpec {
    pub fn resolve(&self) -> Result<SrTarget> {
        match self {
            TargetSpec::Shape(s) => Ok(SrTarget::Shape(*s)),
            TargetSpec::Named(n) if n == "match-t1" => Ok(SrTarget::MatchPrior),
            TargetSpec::Named(n) => Err(Error::Config(format!(
                "superres.target must be \"match-t1\" or [nx, ny, nz], got \"{n}\""
            ))),
        }
    }
}

impl std::str::FromStr for TargetSpec {
    type Err = Error;

    /// `match-t1` or `NXxNYxNZ`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "match-t1" {
            return Ok(TargetSpec::Named(s.into()));
        }
        let dims: Vec<usize> = s
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad target `{s}`: expected match-t1 or NXxNYxNZ")))?;
        match dims[..] {
            [a, b, c] => Ok(TargetSpec::Shape([a, b, c])),
            _ => Err(Error::Config(format!("bad target `{s}`: expected three dimensions"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperresConfig {
    pub target: TargetSpec,
}

impl Default for SuperresConfig {
    fn default() -> Self {
        Self {
            target: TargetSpec::Named("match-t1".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Reference name to volume path, e.g. `HR`, `NR`.
    pub references: BTreeMap<String, PathBuf>,
    /// Method name to predicted volume path.
    pub predictions: BTreeMap<String, PathBuf>,
    /// Interpolation baselines computed from `paths.asl_lr`.
    pub methods: Vec<ResampleMethod>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            references: BTreeMap::new(),
            predictions: BTreeMap::new(),
            methods: ResampleMethod::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub normalization: NormMode,
    pub paths: Paths,
    pub pyramid: PyramidConfig,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub loss: LossWeights,
    pub filter: GaussianFilterSpec,
    pub train: TrainConfig,
    pub superres: SuperresConfig,
    pub metrics: MetricsOptions,
    pub evaluate: EvaluateConfig,
    pub phantom: PhantomSpec,
}

impl RunConfig {
    /// Read `path` (if any), then apply each `key.path=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        Self::from_table(tree)
    }

    pub fn from_table(tree: Table) -> Result<Self> {
        Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            pyramid: self.pyramid.clone(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            loss: self.loss.clone(),
            filter: self.filter.clone(),
            train: self.train.clone(),
            normalization: self.normalization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.settings().validate()?;
        self.phantom.validate()?;
        self.superres.target.resolve()?;
        if !matches!(self.paths.volume_format.as_str(), "nii" | "nii.gz" | "raw") {
            return Err(Error::Config(format!(
                "paths.volume_format must be nii, nii.gz or raw, got `{}`",
                self.paths.volume_format
            )));
        }
        Ok(())
    }

    pub fn checkpoint_dir(&self) -> &Path {
        self.paths.checkpoints.as_deref().unwrap_or(&self.paths.output)
    }

    /// `<output>/<stem>.<volume_format>`.
    pub fn output_volume(&self, stem: &str) -> PathBuf {
        self.paths.output.join(format!("{stem}.{}", self.paths.volume_format))
    }
}

/// Set `key.path` in `tree`; the value is parsed as TOML, falling back to a
/// bare string.
pub fn apply_override(tree: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = tree;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_table(text.parse().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::load(
            None,
            &[
                "train.epochs_per_scale=7".into(),
                "pyramid.num_scales=2".into(),
                "train.lr=1".into(),
                "paths.t1=brain.nii".into(),
                "superres.target=[128, 96, 48]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.epochs_per_scale, 7);
        assert_eq!(c.pyramid.num_scales, Some(2));
        assert_eq!(c.train.lr, 1.0);
        assert_eq!(c.paths.t1.as_deref(), Some(Path::new("brain.nii")));
        assert_eq!(c.superres.target.resolve().unwrap(), SrTarget::Shape([128, 96, 48]));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, &["train.epochs=3".into()]).unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
        assert!(RunConfig::load(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn target_strings() {
        assert_eq!(
            "224x176x256".parse::<TargetSpec>().unwrap(),
            TargetSpec::Shape([224, 176, 256])
        );
        assert_eq!(
            "match-t1".parse::<TargetSpec>().unwrap().resolve().unwrap(),
            SrTarget::MatchPrior
        );
        assert!("12x4".parse::<TargetSpec>().is_err());
        assert!(TargetSpec::Named("bigger".into()).resolve().is_err());
    }
}
