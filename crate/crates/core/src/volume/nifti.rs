//! Minimal NIfTI-1 single-file (`n+1`) codec.
//!
//! Reads 3D volumes of any common scalar datatype in either byte order and
//! writes little-endian float32. Geometry comes from `pixdim[1..=3]` and the
//! sform (or qform) translation.

use std::path::Path;

use ndarray::{Array3, ShapeBuilder};

use super::Volume3D;
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_FLOAT32: i16 = 16;

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl HeaderReader<'_> {
    fn raw<const N: usize>(&self, offset: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[offset..offset + N]);
        if matches!(self.endian, Endian::Big) {
            b.reverse();
        }
        b
    }

    fn i16(&self, offset: usize) -> i16 {
        i16::from_le_bytes(self.raw(offset))
    }

    fn f32(&self, offset: usize) -> f32 {
        f32::from_le_bytes(self.raw(offset))
    }
}

pub(super) fn decode(path: &Path, bytes: &[u8]) -> Result<Volume3D> {
    let fail = |field: &str, reason: String| Error::format(path, field, reason);
    if bytes.len() < HEADER_SIZE {
        return Err(fail(
            "sizeof_hdr",
            format!("file holds {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        ));
    }
    let sizeof_hdr = [0, 1, 2, 3].map(|i| bytes[i]);
    let endian = if i32::from_le_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(fail(
            "sizeof_hdr",
            format!("expected 348, found {}", i32::from_le_bytes(sizeof_hdr)),
        ));
    };
    let h = HeaderReader { bytes, endian };

    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(fail(
            "magic",
            format!(
                "expected single-file NIfTI-1 `n+1`, found {:?}",
                String::from_utf8_lossy(magic)
            ),
        ));
    }

    let dim: Vec<i16> = (0..8).map(|i| h.i16(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) {
        return Err(fail("dim[0]", format!("volume must be 3D, header says {ndim}D")));
    }
    if let Some(i) = (4..=ndim as usize).find(|&i| dim[i] > 1) {
        return Err(fail(
            &format!("dim[{i}]"),
            format!("only 3D volumes are supported, dim[{i}] = {}", dim[i]),
        ));
    }
    let mut shape = [0usize; 3];
    for axis in 0..3 {
        let d = dim[axis + 1];
        if d < 1 {
            return Err(fail(&format!("dim[{}]", axis + 1), format!("invalid extent {d}")));
        }
        shape[axis] = d as usize;
    }

    let mut spacing = [0.0; 3];
    for axis in 0..3 {
        let p = h.f32(76 + 4 * (axis + 1)) as f64;
        if !(p.is_finite() && p > 0.0) {
            return Err(fail(&format!("pixdim[{}]", axis + 1), format!("invalid spacing {p}")));
        }
        spacing[axis] = p;
    }

    let sform_code = h.i16(254);
    let qform_code = h.i16(252);
    let origin = if sform_code > 0 {
        [280, 296, 312].map(|row| h.f32(row + 12) as f64)
    } else if qform_code > 0 {
        [268, 272, 276].map(|o| h.f32(o) as f64)
    } else {
        [0.0; 3]
    };

    let vox_offset = h.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(fail("vox_offset", format!("invalid data offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;

    let datatype = h.i16(70);
    let (width, convert): (usize, fn([u8; 8]) -> f64) = match datatype {
        2 => (1, |b| b[0] as f64),
        256 => (1, |b| b[0] as i8 as f64),
        4 => (2, |b| i16::from_le_bytes([b[0], b[1]]) as f64),
        512 => (2, |b| u16::from_le_bytes([b[0], b[1]]) as f64),
        8 => (4, |b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
        768 => (4, |b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
        16 => (4, |b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
        64 => (8, f64::from_le_bytes),
        other => {
            return Err(fail("datatype", format!("unsupported NIfTI datatype code {other}")));
        }
    };

    let count = shape.iter().product::<usize>();
    let needed = vox_offset + count * width;
    if bytes.len() < needed {
        return Err(fail(
            "dim",
            format!("header describes {needed} bytes of data, file has {}", bytes.len()),
        ));
    }

    let mut slope = h.f32(112) as f64;
    let inter = h.f32(116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };

    let values: Vec<f64> = bytes[vox_offset..needed]
        .chunks_exact(width)
        .map(|chunk| {
            let mut b = [0u8; 8];
            b[..width].copy_from_slice(chunk);
            if matches!(endian, Endian::Big) {
                b[..width].reverse();
            }
            convert(b) * slope + inter
        })
        .collect();

    // NIfTI stores x fastest.
    let data = Array3::from_shape_vec(shape.f(), values).map_err(|e| fail("dim", e.to_string()))?;
    Volume3D::new(data, spacing, origin).map_err(|e| fail("data", e.to_string()))
}

pub(super) fn encode(v: &Volume3D) -> Vec<u8> {
    let mut hdr = vec![0u8; VOX_OFFSET];
    let put = |hdr: &mut Vec<u8>, offset: usize, bytes: &[u8]| {
        hdr[offset..offset + bytes.len()].copy_from_slice(bytes);
    };
    put(&mut hdr, 0, &(HEADER_SIZE as i32).to_le_bytes());
    let shape = v.shape();
    let dims = [3i16, shape[0] as i16, shape[1] as i16, shape[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put(&mut hdr, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut hdr, 70, &DT_FLOAT32.to_le_bytes());
    put(&mut hdr, 72, &32i16.to_le_bytes());
    let sp = v.spacing();
    let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut hdr, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut hdr, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut hdr, 112, &1.0f32.to_le_bytes());
    // xyzt_units: mm
    hdr[123] = 2;
    put(&mut hdr, 252, &1i16.to_le_bytes());
    put(&mut hdr, 254, &1i16.to_le_bytes());
    let o = v.origin();
    for (axis, off) in [268usize, 272, 276].into_iter().enumerate() {
        put(&mut hdr, off, &(o[axis] as f32).to_le_bytes());
    }
    for (axis, row) in [280usize, 296, 312].into_iter().enumerate() {
        let mut srow = [0.0f32; 4];
        srow[axis] = sp[axis] as f32;
        srow[3] = o[axis] as f32;
        for (j, s) in srow.iter().enumerate() {
            put(&mut hdr, row + 4 * j, &s.to_le_bytes());
        }
    }
    put(&mut hdr, 344, b"n+1\0");

    hdr.reserve(v.num_voxels() * 4);
    // Transposed iteration visits x fastest.
    for &x in v.data().t().iter() {
        hdr.extend_from_slice(&(x as f32).to_le_bytes());
    }
    hdr
}
