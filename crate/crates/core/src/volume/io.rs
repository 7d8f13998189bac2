use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{nifti, raw, Volume3D};
use crate::error::{Error, Result};

/// On-disk volume encodings, chosen from the file name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    NiftiGz,
    /// float32 blob with a `.hdr` text sidecar.
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if name.ends_with(".nii.gz") {
            Ok(Self::NiftiGz)
        } else if name.ends_with(".nii") {
            Ok(Self::Nifti)
        } else if name.ends_with(".raw") {
            Ok(Self::Raw)
        } else {
            Err(Error::format(path, "extension", "expected .nii, .nii.gz or .raw"))
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => nifti::decode(path, &read_bytes(path)?),
        VolumeFormat::NiftiGz => {
            let compressed = read_bytes(path)?;
            let mut bytes = Vec::new();
            GzDecoder::new(compressed.as_slice())
                .read_to_end(&mut bytes)
                .map_err(|e| Error::format(path, "gzip", e.to_string()))?;
            nifti::decode(path, &bytes)
        }
        VolumeFormat::Raw => {
            let header_path = raw::sidecar_path(path);
            let header = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
            raw::decode(&header_path, &header, path, &read_bytes(path)?)
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes samples as float32; `.raw` geometry is stored exactly.
pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => write_bytes(path, &nifti::encode(v)),
        VolumeFormat::NiftiGz => {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&nifti::encode(v))
                .and_then(|_| enc.finish())
                .map_err(|e| Error::io(path, e))
                .and_then(|bytes| write_bytes(path, &bytes))
        }
        VolumeFormat::Raw => {
            write_bytes(path, &raw::encode_data(v))?;
            write_bytes(&raw::sidecar_path(path), raw::encode_header(v).as_bytes())
        }
    }
}
