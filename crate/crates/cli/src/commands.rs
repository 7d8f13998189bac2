//! One function per subcommand. Each validates its configuration before
//! touching any data and echoes the effective configuration to the output
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use aslsr_core::metrics::{baseline_upsample, run_comparison};
use aslsr_core::phantom::make_phantom_set;
use aslsr_core::{
    load_volume, save_volume, super_resolve, train_pyramid, Error, MetricsReport, Result, SrRequest, SrTarget,
    TrainedPyramid, Volume3D,
};
use serde_json::json;

use crate::config::RunConfig;

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const PHANTOM_MANIFEST: &str = "phantom_manifest.json";

/// Name of the configuration echo written by `command`.
pub fn effective_config_name(command: &str) -> String {
    format!("effective_config.{command}.toml")
}

fn prepare_output(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.paths.output.clone();
    fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    let path = dir.join(effective_config_name(command));
    fs::write(&path, cfg.to_toml()?).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    Ok(dir)
}

/// Load a required input volume; absent or missing files are configuration
/// errors naming `field`.
fn load_input(path: Option<&Path>, field: &str) -> Result<Volume3D> {
    let path = path.ok_or_else(|| Error::Config(format!("{field} is required")))?;
    if !path.exists() {
        return Err(Error::Config(format!("{field}: no such file {}", path.display())));
    }
    load_volume(path)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainedPyramid> {
    cfg.validate()?;
    let x = load_input(cfg.paths.asl_lr.as_deref(), "paths.asl_lr")?;
    let a = load_input(cfg.paths.t1.as_deref(), "paths.t1")?;
    let out = prepare_output(cfg, "train")?;
    let (trained, log) = train_pyramid(&x, &a, &cfg.settings(), Some(&out))?;
    if let Some(last) = log.records.last() {
        log::info!(
            "trained {} scales into {}; final total {:.5}, mse {:.5}",
            trained.num_scales(),
            out.display(),
            last.total,
            last.mse
        );
    }
    Ok(trained)
}

fn resolve_target(cfg: &RunConfig) -> Result<SrTarget> {
    cfg.superres.target.resolve()
}

pub fn cmd_superres(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let target = resolve_target(cfg)?;
    let trained = TrainedPyramid::load(cfg.checkpoint_dir())?;
    let x = load_input(cfg.paths.asl_lr.as_deref(), "paths.asl_lr")?;
    let a = load_input(cfg.paths.t1.as_deref(), "paths.t1")?;
    prepare_output(cfg, "superres")?;
    let sr = super_resolve(&SrRequest {
        trained: &trained,
        x: &x,
        a_hr: &a,
        target,
    })?;
    let path = cfg.output_volume("sr");
    save_volume(&sr, &path)?;
    log::info!(
        "wrote {} with shape {:?}, spacing {:?}",
        path.display(),
        sr.shape(),
        sr.spacing()
    );
    Ok(path)
}

fn load_named(entries: &std::collections::BTreeMap<String, PathBuf>, field: &str) -> Result<Vec<(String, Volume3D)>> {
    entries
        .iter()
        .map(|(name, path)| Ok((name.clone(), load_input(Some(path), &format!("{field}.{name}"))?)))
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let ev = &cfg.evaluate;
    if ev.references.is_empty() {
        return Err(Error::Config(
            "evaluate.references is empty; at least one reference is required".into(),
        ));
    }
    if ev.methods.is_empty() && ev.predictions.is_empty() {
        return Err(Error::Config(
            "nothing to evaluate: evaluate.methods and evaluate.predictions are both empty".into(),
        ));
    }
    let references = load_named(&ev.references, "evaluate.references")?;
    let predictions = load_named(&ev.predictions, "evaluate.predictions")?;
    let x = if ev.methods.is_empty() {
        None
    } else {
        Some(load_input(cfg.paths.asl_lr.as_deref(), "paths.asl_lr")?)
    };
    let out = prepare_output(cfg, "evaluate")?;
    let report = run_comparison(x.as_ref(), &references, &predictions, &ev.methods, &cfg.metrics)?;
    for (name, text) in [
        (METRICS_CSV, report.to_csv()),
        (METRICS_JSON, report.to_json()),
        (METRICS_TABLE, report.to_table()),
    ] {
        let path = out.join(name);
        fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
    }
    for note in &report.notes {
        log::warn!("{note}");
    }
    Ok(report)
}

pub fn cmd_phantom(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let set = make_phantom_set(&cfg.phantom)?;
    let out = prepare_output(cfg, "phantom")?;
    let mut files = serde_json::Map::new();
    for (name, v) in [("hr", &set.hr), ("nr", &set.nr), ("lr", &set.lr), ("t1", &set.t1)] {
        let path = cfg.output_volume(name);
        save_volume(v, &path)?;
        files.insert(
            name.into(),
            json!({
                "file": path.file_name().map(|f| f.to_string_lossy().into_owned()),
                "shape": v.shape(),
                "spacing": v.spacing(),
                "origin": v.origin(),
            }),
        );
    }
    let manifest = json!({ "spec": cfg.phantom, "volumes": files });
    let path = out.join(PHANTOM_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn cmd_baseline(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let x = load_input(cfg.paths.asl_lr.as_deref(), "paths.asl_lr")?;
    let target = match resolve_target(cfg)? {
        SrTarget::Shape(s) => s,
        SrTarget::MatchPrior => load_input(cfg.paths.t1.as_deref(), "paths.t1")?.shape(),
    };
    if cfg.evaluate.methods.is_empty() {
        return Err(Error::Config("evaluate.methods is empty".into()));
    }
    prepare_output(cfg, "baseline")?;
    cfg.evaluate
        .methods
        .iter()
        .map(|&m| {
            let up = baseline_upsample(&x, target, m)?;
            let path = cfg.output_volume(&format!("baseline_{m}"));
            save_volume(&up, &path)?;
            Ok(path)
        })
        .collect()
}
