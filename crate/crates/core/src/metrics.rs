//! PSNR, 3D SSIM, interpolation baselines and the method x reference
//! comparison report.

use std::fmt::Write as _;

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::{resample, ResampleMethod, Shape3, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsOptions {
    /// Edge length of the cubic SSIM window (odd).
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Fixed dynamic range; each reference's `max - min` when absent.
    pub data_range: Option<f64>,
    /// Restrict both metrics to voxels where the reference exceeds
    /// `mask_fraction * max(reference)`.
    pub mask: bool,
    pub mask_fraction: f64,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            data_range: None,
            mask: false,
            mask_fraction: 0.05,
        }
    }
}

fn same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Geometry(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `max - min` of the reference.
pub fn dynamic_range(reference: &Array3<f64>) -> f64 {
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    hi - lo
}

fn resolve_range(reference: &Array3<f64>, data_range: Option<f64>) -> Result<f64> {
    let r = data_range.unwrap_or_else(|| dynamic_range(reference));
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::Config(format!("data range must be positive, got {r}")));
    }
    Ok(r)
}

/// Foreground mask: reference above `fraction` of its maximum.
pub fn foreground_mask(reference: &Array3<f64>, fraction: f64) -> Array3<bool> {
    let max = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    reference.mapv(|v| v > fraction * max)
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr(pred: &Array3<f64>, reference: &Array3<f64>, data_range: Option<f64>) -> Result<f64> {
    psnr_masked(pred, reference, data_range, None)
}

pub fn psnr_masked(
    pred: &Array3<f64>,
    reference: &Array3<f64>,
    data_range: Option<f64>,
    mask: Option<&Array3<bool>>,
) -> Result<f64> {
    same_shape(pred, reference)?;
    let range = resolve_range(reference, data_range)?;
    let (mut sum, mut n) = (0.0, 0usize);
    Zip::indexed(pred).and(reference).for_each(|idx, &p, &r| {
        if mask.is_none_or(|m| m[idx]) {
            sum += (p - r) * (p - r);
            n += 1;
        }
    });
    if n == 0 {
        return Err(Error::Config("metric mask selects no voxels".into()));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Sum over every `w`-long window along `axis` (valid positions only).
fn box_sum(a: &Array3<f64>, axis: usize, w: usize) -> Array3<f64> {
    let mut shape = a.raw_dim();
    shape[axis] = a.len_of(Axis(axis)) + 1 - w;
    let mut out = Array3::zeros(shape);
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(a.lanes(Axis(axis)))
        .for_each(|mut o, lane| {
            for (i, o) in o.iter_mut().enumerate() {
                *o = (i..i + w).map(|j| lane[j]).sum();
            }
        });
    out
}

fn window_sums(a: &Array3<f64>, w: usize) -> Array3<f64> {
    box_sum(&box_sum(&box_sum(a, 0, w), 1, w), 2, w)
}

/// Mean SSIM over all fully contained cubic windows, using sample
/// (N - 1) variances and covariance.
pub fn ssim3d(pred: &Array3<f64>, reference: &Array3<f64>, opts: &MetricsOptions) -> Result<f64> {
    ssim3d_masked(pred, reference, opts, None)
}

/// As [`ssim3d`], averaging only windows whose center lies in `mask`.
pub fn ssim3d_masked(
    pred: &Array3<f64>,
    reference: &Array3<f64>,
    opts: &MetricsOptions,
    mask: Option<&Array3<bool>>,
) -> Result<f64> {
    same_shape(pred, reference)?;
    let w = opts.window;
    if w == 0 || w.is_multiple_of(2) {
        return Err(Error::Config(format!("SSIM window must be odd, got {w}")));
    }
    if pred.shape().iter().any(|&n| n < w) {
        return Err(Error::Config(format!(
            "SSIM window {w} exceeds the volume extent {:?}",
            pred.shape()
        )));
    }
    let range = resolve_range(reference, opts.data_range)?;
    let c1 = (opts.k1 * range).powi(2);
    let c2 = (opts.k2 * range).powi(2);
    // shift both inputs by a common offset to keep window sums well scaled
    let offset = 0.5 * (pred.mean().unwrap_or(0.0) + reference.mean().unwrap_or(0.0));
    let x = pred.mapv(|v| v - offset);
    let y = reference.mapv(|v| v - offset);
    let sx = window_sums(&x, w);
    let sy = window_sums(&y, w);
    let sxx = window_sums(&(&x * &x), w);
    let syy = window_sums(&(&y * &y), w);
    let sxy = window_sums(&(&x * &y), w);
    let n = (w * w * w) as f64;
    let half = w / 2;
    let (mut total, mut count) = (0.0, 0usize);
    Zip::indexed(&sx)
        .and(&sy)
        .and(&sxx)
        .and(&syy)
        .and(&sxy)
        .for_each(|(i, j, k), &sx, &sy, &sxx, &syy, &sxy| {
            if mask.is_some_and(|m| !m[[i + half, j + half, k + half]]) {
                return;
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx - sx * mx) / (n - 1.0);
            let vy = (syy - sy * my) / (n - 1.0);
            let cxy = (sxy - sx * my) / (n - 1.0);
            let (mx, my) = (mx + offset, my + offset);
            let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        });
    if count == 0 {
        return Err(Error::Config("metric mask selects no SSIM windows".into()));
    }
    Ok(total / count as f64)
}

/// Interpolation baseline: plain resampling onto the target grid.
pub fn baseline_upsample(x: &Volume3D, target: Shape3, method: ResampleMethod) -> Result<Volume3D> {
    resample(x, target, method)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub reference: String,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_db: f64,
    pub ssim: f64,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("invalid psnr_db `{t}`"))),
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub references: Vec<String>,
    /// Dynamic range used for each reference, in reference order.
    pub data_ranges: Vec<f64>,
    pub options: MetricsOptions,
    /// Inputs that had to be resampled onto a reference grid.
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn get(&self, method: &str, reference: &str) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.reference == reference)
    }

    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,reference,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.method, r.reference, fmt_db(r.psnr_db), r.ssim);
        }
        out
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
        let bad = |m: String| Error::Config(format!("metrics csv: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("method,reference,psnr_db,ssim") {
            return Err(bad("unexpected header".into()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 4 {
                    return Err(bad(format!("bad row `{l}`")));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
                Ok(MetricsRow {
                    method: f[0].into(),
                    reference: f[1].into(),
                    psnr_db: num(f[2])?,
                    ssim: num(f[3])?,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("metrics report: {e}")))
    }

    /// Aligned text table with one column pair per reference.
    pub fn to_table(&self) -> String {
        let methods = self.methods();
        let mw = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<mw$}", "method");
        for r in &self.references {
            let _ = write!(out, "  {:>12}  {:>8}", format!("PSNR/{r}"), format!("SSIM/{r}"));
        }
        out.push('\n');
        for m in methods {
            let _ = write!(out, "{m:<mw$}");
            for r in &self.references {
                match self.get(m, r) {
                    Some(row) => {
                        let db = if row.psnr_db.is_infinite() {
                            "inf".to_string()
                        } else {
                            format!("{:.4}", row.psnr_db)
                        };
                        let _ = write!(out, "  {db:>12}  {:>8.4}", row.ssim);
                    }
                    None => {
                        let _ = write!(out, "  {:>12}  {:>8}", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluate one prediction against one reference with the report options.
pub fn evaluate_pair(pred: &Array3<f64>, reference: &Array3<f64>, opts: &MetricsOptions) -> Result<(f64, f64)> {
    let mask = opts.mask.then(|| foreground_mask(reference, opts.mask_fraction));
    let p = psnr_masked(pred, reference, opts.data_range, mask.as_ref())?;
    let s = ssim3d_masked(pred, reference, opts, mask.as_ref())?;
    Ok((p, s))
}

/// Interpolation baselines of `x_lr` plus the given predictions, scored
/// against every reference. Predictions off a reference grid are linearly
/// resampled onto it first, and that is recorded in the notes. `x_lr` is
/// only needed when `methods` is non-empty.
pub fn run_comparison(
    x_lr: Option<&Volume3D>,
    references: &[(String, Volume3D)],
    predictions: &[(String, Volume3D)],
    methods: &[ResampleMethod],
    opts: &MetricsOptions,
) -> Result<MetricsReport> {
    if references.is_empty() {
        return Err(Error::Config("comparison needs at least one reference volume".into()));
    }
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    let mut data_ranges = Vec::new();
    for (_, r) in references {
        data_ranges.push(resolve_range(r.data(), opts.data_range)?);
    }
    if !methods.is_empty() {
        let x_lr = x_lr.ok_or_else(|| Error::Config("interpolation baselines need the low-resolution input".into()))?;
        for &m in methods {
            for (rname, r) in references {
                let up = baseline_upsample(x_lr, r.shape(), m)?;
                let (psnr_db, ssim) = evaluate_pair(up.data(), r.data(), opts)?;
                rows.push(MetricsRow {
                    method: m.name().into(),
                    reference: rname.clone(),
                    psnr_db,
                    ssim,
                });
            }
        }
    }
    for (pname, p) in predictions {
        for (rname, r) in references {
            let (psnr_db, ssim) = if p.shape() == r.shape() {
                evaluate_pair(p.data(), r.data(), opts)?
            } else {
                notes.push(format!(
                    "{pname}: resampled {:?} -> {:?} (linear) for reference {rname}",
                    p.shape(),
                    r.shape()
                ));
                let q = resample(p, r.shape(), ResampleMethod::Linear)?;
                evaluate_pair(q.data(), r.data(), opts)?
            };
            rows.push(MetricsRow {
                method: pname.clone(),
                reference: rname.clone(),
                psnr_db,
                ssim,
            });
        }
    }
    Ok(MetricsReport {
        rows,
        references: references.iter().map(|(n, _)| n.clone()).collect(),
        data_ranges,
        options: opts.clone(),
        notes,
    })
}
