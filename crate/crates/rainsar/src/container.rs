//! Shared binary file container for scans, rasters, and checkpoints.
//!
//! Layout: a fixed 64-byte header, a JSON metadata block, then a raw payload
//! of little-endian numeric blocks whose structure the metadata describes.
//!
//! ```text
//! bytes  0..8    magic  b"RNSRBIN\0"
//! bytes  8..16   kind tag (8 ASCII bytes, see [`ContainerKind`])
//! bytes 16..20   u32 LE format version
//! bytes 20..28   u64 LE metadata length in bytes
//! bytes 28..36   u64 LE payload length in bytes
//! bytes 36..64   reserved, zero
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoRaster, GeoTransform};

pub const MAGIC: &[u8; 8] = b"RNSRBIN\0";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a container file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unknown container kind tag {tag:?}")]
    BadKind { path: String, tag: String },
    #[error("{path}: container kind is {found:?}, expected {expected:?}")]
    WrongKind {
        path: String,
        found: ContainerKind,
        expected: ContainerKind,
    },
    #[error("{path}: unsupported container version {0}", .version)]
    Version { path: String, version: u32 },
    #[error("{path}: file truncated ({what})")]
    Truncated { path: String, what: &'static str },
    #[error("{path}: invalid metadata: {source}")]
    Meta {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: invalid metadata: {reason}")]
    BadMeta { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    PolarScan,
    GeoRaster,
    Checkpoint,
}

impl ContainerKind {
    fn tag(self) -> &'static [u8; 8] {
        match self {
            ContainerKind::PolarScan => b"POLARSCN",
            ContainerKind::GeoRaster => b"GEORASTR",
            ContainerKind::Checkpoint => b"CHECKPNT",
        }
    }

    fn from_tag(tag: &[u8]) -> Option<Self> {
        match tag {
            b"POLARSCN" => Some(ContainerKind::PolarScan),
            b"GEORASTR" => Some(ContainerKind::GeoRaster),
            b"CHECKPNT" => Some(ContainerKind::Checkpoint),
            _ => None,
        }
    }
}

/// A container read back from disk, metadata parsed but payload raw.
#[derive(Debug)]
pub struct RawContainer {
    pub kind: ContainerKind,
    pub version: u32,
    pub meta: serde_json::Value,
    pub payload: Vec<u8>,
}

fn io_err(path: &Path, source: std::io::Error) -> ContainerError {
    ContainerError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a container file. `meta` must serialize to a JSON object.
pub fn write_container(
    path: &Path,
    kind: ContainerKind,
    meta: &serde_json::Value,
    payload: &[u8],
) -> Result<(), ContainerError> {
    let meta_bytes = serde_json::to_vec(meta).map_err(|source| ContainerError::Meta {
        path: path.display().to_string(),
        source,
    })?;
    let mut header = [0u8; HEADER_LEN];
    header[0..8].copy_from_slice(MAGIC);
    header[8..16].copy_from_slice(kind.tag());
    header[16..20].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    header[20..28].copy_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    header[28..36].copy_from_slice(&(payload.len() as u64).to_le_bytes());

    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&header).map_err(|e| io_err(path, e))?;
    f.write_all(&meta_bytes).map_err(|e| io_err(path, e))?;
    f.write_all(payload).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read and validate a container file.
pub fn read_container(path: &Path) -> Result<RawContainer, ContainerError> {
    let p = path.display().to_string();
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; HEADER_LEN];
    f.read_exact(&mut header).map_err(|_| ContainerError::Truncated {
        path: p.clone(),
        what: "header",
    })?;
    if &header[0..8] != MAGIC {
        return Err(ContainerError::BadMagic { path: p });
    }
    let kind = ContainerKind::from_tag(&header[8..16]).ok_or_else(|| ContainerError::BadKind {
        path: p.clone(),
        tag: String::from_utf8_lossy(&header[8..16]).into_owned(),
    })?;
    let version = u32::from_le_bytes(header[16..20].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ContainerError::Version { path: p, version });
    }
    let meta_len = u64::from_le_bytes(header[20..28].try_into().unwrap()) as usize;
    let payload_len = u64::from_le_bytes(header[28..36].try_into().unwrap()) as usize;

    let mut meta_bytes = vec![0u8; meta_len];
    f.read_exact(&mut meta_bytes).map_err(|_| ContainerError::Truncated {
        path: p.clone(),
        what: "metadata block",
    })?;
    let meta = serde_json::from_slice(&meta_bytes).map_err(|source| ContainerError::Meta {
        path: p.clone(),
        source,
    })?;
    let mut payload = vec![0u8; payload_len];
    f.read_exact(&mut payload).map_err(|_| ContainerError::Truncated {
        path: p.clone(),
        what: "payload block",
    })?;
    Ok(RawContainer {
        kind,
        version,
        meta,
        payload,
    })
}

/// Encode a float32 slice as little-endian bytes.
pub fn f32s_to_le(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode little-endian bytes into float32 values.
pub fn le_to_f32s(bytes: &[u8]) -> Option<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct RasterMeta {
    rows: usize,
    cols: usize,
    resolution_m: f64,
    geotransform: [f64; 6],
    timestamp: DateTime<Utc>,
    channels: Vec<String>,
    metadata: std::collections::BTreeMap<String, String>,
}

/// Save a [`GeoRaster`] as a container: metadata block plus one little-endian
/// float32 plane per channel, in channel order.
pub fn save_raster(path: &Path, raster: &GeoRaster) -> Result<(), ContainerError> {
    let meta = RasterMeta {
        rows: raster.rows(),
        cols: raster.cols(),
        resolution_m: raster.resolution_m,
        geotransform: raster.transform.0,
        timestamp: raster.timestamp,
        channels: raster
            .channel_names()
            .into_iter()
            .map(|s| s.to_string())
            .collect(),
        metadata: raster.metadata.clone(),
    };
    let mut payload = Vec::with_capacity(raster.rows() * raster.cols() * raster.channels().len() * 4);
    for (_, plane) in raster.channels() {
        let flat: Vec<f32> = plane.iter().copied().collect();
        payload.extend_from_slice(&f32s_to_le(&flat));
    }
    let meta_value =
        serde_json::to_value(&meta).map_err(|source| ContainerError::Meta {
            path: path.display().to_string(),
            source,
        })?;
    write_container(path, ContainerKind::GeoRaster, &meta_value, &payload)
}

/// Load a [`GeoRaster`] container.
pub fn load_raster(path: &Path) -> Result<GeoRaster, ContainerError> {
    let p = path.display().to_string();
    let raw = read_container(path)?;
    if raw.kind != ContainerKind::GeoRaster {
        return Err(ContainerError::WrongKind {
            path: p,
            found: raw.kind,
            expected: ContainerKind::GeoRaster,
        });
    }
    let meta: RasterMeta = serde_json::from_value(raw.meta).map_err(|source| ContainerError::Meta {
        path: p.clone(),
        source,
    })?;
    let plane = meta.rows * meta.cols;
    let expected = plane * meta.channels.len() * 4;
    if raw.payload.len() != expected {
        return Err(ContainerError::BadMeta {
            path: p,
            reason: format!(
                "payload is {} bytes, expected {} for {} channels of {}x{}",
                raw.payload.len(),
                expected,
                meta.channels.len(),
                meta.rows,
                meta.cols
            ),
        });
    }
    let mut raster = GeoRaster::new(
        meta.rows,
        meta.cols,
        meta.resolution_m,
        GeoTransform(meta.geotransform),
        meta.timestamp,
    );
    raster.metadata = meta.metadata;
    for (i, name) in meta.channels.iter().enumerate() {
        let bytes = &raw.payload[i * plane * 4..(i + 1) * plane * 4];
        let values = le_to_f32s(bytes).expect("length checked above");
        let arr = Array2::from_shape_vec((meta.rows, meta.cols), values)
            .expect("shape matches plane size");
        raster.add_channel(name, arr).map_err(|e| ContainerError::BadMeta {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    Ok(raster)
}
