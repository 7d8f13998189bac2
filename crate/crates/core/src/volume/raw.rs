//! Portable fallback format: little-endian float32 samples (x fastest) in
//! `<name>.raw` plus a `<name>.raw.hdr` text sidecar:
//!
//! ```text
//! # aslsr raw volume
//! format = float32-le
//! order = x-fastest
//! shape = 64 48 48
//! spacing = 1.875 1.875 2.5
//! origin = 0 0 0
//! ```

use std::path::{Path, PathBuf};

use ndarray::{Array3, ShapeBuilder};

use super::Volume3D;
use crate::error::{Error, Result};

pub(super) fn sidecar_path(data_path: &Path) -> PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

pub(super) fn encode_header(v: &Volume3D) -> String {
    let join = |xs: [f64; 3]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
    let s = v.shape();
    format!(
        "# aslsr raw volume\nformat = float32-le\norder = x-fastest\nshape = {} {} {}\nspacing = {}\norigin = {}\n",
        s[0],
        s[1],
        s[2],
        join(v.spacing()),
        join(v.origin())
    )
}

pub(super) fn encode_data(v: &Volume3D) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.num_voxels() * 4);
    for &x in v.data().t().iter() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

fn parse_triple<T: std::str::FromStr>(path: &Path, field: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::format(
            path,
            field,
            format!("expected 3 values, found {}", parts.len()),
        ));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::format(path, field, format!("cannot parse `{p}`")))?,
        );
    }
    out.try_into()
        .map_err(|_| Error::format(path, field, "expected 3 values"))
}

pub(super) fn decode(header_path: &Path, header: &str, data_path: &Path, bytes: &[u8]) -> Result<Volume3D> {
    let mut shape = None;
    let mut spacing = None;
    let mut origin = None;
    for line in header.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(header_path, line, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "format" if value != "float32-le" => {
                return Err(Error::format(header_path, "format", format!("unsupported `{value}`")));
            }
            "order" if value != "x-fastest" => {
                return Err(Error::format(header_path, "order", format!("unsupported `{value}`")));
            }
            "format" | "order" => {}
            "shape" => shape = Some(parse_triple::<usize>(header_path, "shape", value)?),
            "spacing" => spacing = Some(parse_triple::<f64>(header_path, "spacing", value)?),
            "origin" => origin = Some(parse_triple::<f64>(header_path, "origin", value)?),
            other => {
                return Err(Error::format(header_path, other, "unknown header key"));
            }
        }
    }
    let shape = shape.ok_or_else(|| Error::format(header_path, "shape", "missing"))?;
    let spacing = spacing.ok_or_else(|| Error::format(header_path, "spacing", "missing"))?;
    let origin = origin.unwrap_or([0.0; 3]);
    if shape.contains(&0) {
        return Err(Error::format(header_path, "shape", format!("empty axis in {shape:?}")));
    }
    if let Some(a) = spacing.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::format(
            header_path,
            "spacing",
            format!("axis {a} spacing {} must be positive", spacing[a]),
        ));
    }
    let count: usize = shape.iter().product();
    if bytes.len() != count * 4 {
        return Err(Error::format(
            data_path,
            "shape",
            format!("expected {} bytes of float32 data, found {}", count * 4, bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let data =
        Array3::from_shape_vec(shape.f(), values).map_err(|e| Error::format(data_path, "shape", e.to_string()))?;
    Volume3D::new(data, spacing, origin).map_err(|e| Error::format(data_path, "data", e.to_string()))
}
