//! Native lossless slice format: little-endian `i16` image slices and `u8`
//! label slices, both row-major with dimensions supplied externally.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dims, LabelVolume, Modality, Result, ScalarVolume, VolumeError, VoxelSpacing, MAX_LABEL};

pub fn read_slices_i16(
    paths: &[PathBuf],
    dims: Dims,
    spacing: VoxelSpacing,
    modality: Modality,
) -> Result<ScalarVolume> {
    if paths.len() != dims.nz {
        return Err(VolumeError::DimensionMismatch(format!(
            "{} slice files for nz = {}",
            paths.len(),
            dims.nz
        )));
    }
    let n = dims.slice_len();
    let mut data = Vec::with_capacity(dims.len());
    for path in paths {
        let bytes = fs::read(path).map_err(|e| VolumeError::io(path, e))?;
        if bytes.len() != 2 * n {
            return Err(VolumeError::DimensionMismatch(format!(
                "{}: {} bytes, expected {}",
                path.display(),
                bytes.len(),
                2 * n
            )));
        }
        data.extend(
            bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64),
        );
    }
    ScalarVolume::new(dims, spacing, modality, data)
}

/// Write one `i16` file per slice as `<prefix>_<z:03>.raw`. Values must be
/// integral and representable.
pub fn write_slices_i16(vol: &ScalarVolume, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| VolumeError::io(dir, e))?;
    let dims = vol.dims();
    let mut paths = Vec::with_capacity(dims.nz);
    for z in 0..dims.nz {
        let mut bytes = Vec::with_capacity(2 * dims.slice_len());
        for &v in vol.slice(z) {
            if v.fract() != 0.0 || v < i16::MIN as f64 || v > i16::MAX as f64 {
                return Err(VolumeError::UnsupportedDatatype(format!(
                    "value {v} not representable as i16"
                )));
            }
            bytes.extend_from_slice(&(v as i16).to_le_bytes());
        }
        let path = dir.join(format!("{prefix}_{z:03}.raw"));
        fs::write(&path, bytes).map_err(|e| VolumeError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn read_mask_slice(path: &Path, nx: usize, ny: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| VolumeError::io(path, e))?;
    if bytes.len() != nx * ny {
        return Err(VolumeError::DimensionMismatch(format!(
            "{}: {} bytes, expected {}x{}",
            path.display(),
            bytes.len(),
            nx,
            ny
        )));
    }
    if let Some(v) = bytes.iter().find(|&&v| v > MAX_LABEL) {
        return Err(VolumeError::InvariantViolation(format!(
            "{}: label {v} outside {{0,1,2}}",
            path.display()
        )));
    }
    Ok(bytes)
}

pub fn write_mask_slice(path: &Path, labels: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| VolumeError::io(parent, e))?;
    }
    fs::write(path, labels).map_err(|e| VolumeError::io(path, e))
}

pub fn read_mask_slices(paths: &[PathBuf], dims: Dims, spacing: VoxelSpacing) -> Result<LabelVolume> {
    if paths.len() != dims.nz {
        return Err(VolumeError::DimensionMismatch(format!(
            "{} mask files for nz = {}",
            paths.len(),
            dims.nz
        )));
    }
    let mut data = Vec::with_capacity(dims.len());
    for p in paths {
        data.extend(read_mask_slice(p, dims.nx, dims.ny)?);
    }
    LabelVolume::new(dims, spacing, data)
}

pub fn write_mask_slices(vol: &LabelVolume, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(vol.dims().nz);
    for z in 0..vol.dims().nz {
        let path = dir.join(format!("{prefix}_{z:03}.mask"));
        write_mask_slice(&path, vol.slice(z))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Whole label volume in a single `u8` file.
pub fn write_label_volume(vol: &LabelVolume, path: &Path) -> Result<()> {
    write_mask_slice(path, vol.data())
}

pub fn read_label_volume(path: &Path, dims: Dims, spacing: VoxelSpacing) -> Result<LabelVolume> {
    let bytes = fs::read(path).map_err(|e| VolumeError::io(path, e))?;
    if bytes.len() != dims.len() {
        return Err(VolumeError::DimensionMismatch(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            dims.len()
        )));
    }
    LabelVolume::new(dims, spacing, bytes)
}
