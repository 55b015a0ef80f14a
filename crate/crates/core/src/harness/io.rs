//! On-disk volume format.
//!
//! A volume `<id>` is three files in one directory:
//! - `<id>.toml`: metadata (`id`, `shape = [D, H, W]`, `spacing`, file names and element types),
//! - `<id>.image.f32`: intensities, 32-bit IEEE float, little-endian, C order,
//! - `<id>.label.u8`: labels, one byte per voxel, 0 or 1, C order.

use super::data::VolumeRecord;
use crate::error::{Error, Result};
use crate::losses::VoxelMask;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const IMAGE_DTYPE: &str = "f32le";
pub const LABEL_DTYPE: &str = "u8";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub id: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub image_file: String,
    pub image_dtype: String,
    pub label_file: String,
    pub label_dtype: String,
}

/// Writes the three files of `record` into `dir` and returns the metadata path.
pub fn save_volume(record: &VolumeRecord, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = VolumeHeader {
        id: record.id.clone(),
        shape: record.dims,
        spacing: record.spacing,
        image_file: format!("{}.image.f32", record.id),
        image_dtype: IMAGE_DTYPE.into(),
        label_file: format!("{}.label.u8", record.id),
        label_dtype: LABEL_DTYPE.into(),
    };
    let image: Vec<u8> = record.image.iter().flat_map(|v| v.to_le_bytes()).collect();
    let label: Vec<u8> = record.label.bits().iter().map(|&b| u8::from(b)).collect();
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(&header.image_file, &image)?;
    write(&header.label_file, &label)?;
    let meta = dir.join(format!("{}.toml", record.id));
    let text = toml::to_string(&header).map_err(|e| Error::format(&meta, e.to_string()))?;
    write(&format!("{}.toml", record.id), text.as_bytes())?;
    Ok(meta)
}

/// Reads a volume from its metadata file.
pub fn load_volume(meta: &Path) -> Result<VolumeRecord> {
    let text = fs::read_to_string(meta).map_err(|e| Error::io(meta, e))?;
    let header: VolumeHeader = toml::from_str(&text).map_err(|e| Error::format(meta, e.to_string()))?;
    if header.image_dtype != IMAGE_DTYPE || header.label_dtype != LABEL_DTYPE {
        return Err(Error::format(
            meta,
            format!("unsupported element types {} / {}", header.image_dtype, header.label_dtype),
        ));
    }
    let n: usize = header.shape.iter().product();
    if n == 0 {
        return Err(Error::format(meta, "shape has a zero extent"));
    }
    let dir = meta.parent().unwrap_or(Path::new("."));
    let read = |name: &str, want: usize| -> Result<Vec<u8>> {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() != want {
            return Err(Error::format(
                &p,
                format!("expected {want} bytes for shape {:?}, found {}", header.shape, bytes.len()),
            ));
        }
        Ok(bytes)
    };
    let image_bytes = read(&header.image_file, 4 * n)?;
    let label_bytes = read(&header.label_file, n)?;
    let image = image_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut bits = Vec::with_capacity(n);
    for &b in &label_bytes {
        match b {
            0 => bits.push(false),
            1 => bits.push(true),
            other => {
                return Err(Error::format(dir.join(&header.label_file), format!("label value {other} is not 0 or 1")));
            }
        }
    }
    VolumeRecord::new(header.id, image, VoxelMask::new(header.shape, bits)?, header.spacing)
}

/// Loads every volume whose metadata file sits directly in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<VolumeRecord>> {
    let mut metas: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    metas.sort();
    if metas.is_empty() {
        return Err(Error::format(dir, "no volume metadata files found"));
    }
    metas.iter().map(|m| load_volume(m)).collect()
}
