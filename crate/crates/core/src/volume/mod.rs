//! Image and label volumes, manifests and modality-specific preprocessing.
//!
//! Voxels are stored slice by slice (head to foot), each slice row-major with
//! `x` varying fastest: `index = z * nx * ny + y * nx + x`.

mod manifest;
mod nifti;
mod preprocess;
mod raw;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{
    load_manifest, load_study, write_manifest, ClipMode, DatasetManifest, DiscIndices, DixonPair,
    PreprocessProfile, RescaleScope, Rounding, StudyData, StudyManifest,
};
pub use nifti::{import_nifti_labels, import_nifti_minimal, NiftiVolume};
pub use preprocess::{
    clip_intensity, downsample_axial, percentile_linear, remap_disc_indices, resize_labels_nearest,
    standardize_labels, standardize_slices, AxialDecimate, StandardizeOptions,
};
pub use raw::{
    read_label_volume, read_mask_slice, read_mask_slices, read_slices_i16, write_label_volume,
    write_mask_slice, write_mask_slices, write_slices_i16,
};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("unsupported datatype: {0}")]
    UnsupportedDatatype(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("volume is empty")]
    EmptyVolume,
    #[error("downsample factor {factor} exceeds depth {nz}")]
    FactorExceedsDepth { factor: usize, nz: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl VolumeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            VolumeError::MissingFile(path)
        } else {
            VolumeError::Io { path, source }
        }
    }
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Physical voxel size in millimetres; `dz` is the slice spacing along the
/// head-foot axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct VoxelSpacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl VoxelSpacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        for (name, v) in [("dx", dx), ("dy", dy), ("dz", dz)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(VolumeError::InvariantViolation(format!(
                    "spacing {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Self { dx, dy, dz })
    }

    pub fn pixel_area_mm2(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.dx * self.dy * self.dz
    }
}

impl TryFrom<[f64; 3]> for VoxelSpacing {
    type Error = VolumeError;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<VoxelSpacing> for [f64; 3] {
    fn from(s: VoxelSpacing) -> Self {
        [s.dx, s.dy, s.dz]
    }
}

/// Voxel counts along x (columns), y (rows) and z (slices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VolumeError::InvariantViolation(format!(
                "dims must be positive, got ({nx}, {ny}, {nz})"
            )));
        }
        Ok(Self { nx, ny, nz })
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        z * self.slice_len() + y * self.nx + x
    }

    pub fn with_nz(&self, nz: usize) -> Self {
        Self { nz, ..*self }
    }
}

impl TryFrom<[usize; 3]> for Dims {
    type Error = VolumeError;

    fn try_from(v: [usize; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        [d.nx, d.ny, d.nz]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "MRI_T1W")]
    MriT1w,
    #[serde(rename = "MRI_T2W")]
    MriT2w,
    #[serde(rename = "MRI_DIXON_WATER")]
    MriDixonWater,
    #[serde(rename = "MRI_DIXON_FAT")]
    MriDixonFat,
    #[serde(rename = "CT")]
    Ct,
}

impl Modality {
    pub fn is_mri(self) -> bool {
        !matches!(self, Modality::Ct)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::MriT1w => "MRI_T1W",
            Modality::MriT2w => "MRI_T2W",
            Modality::MriDixonWater => "MRI_DIXON_WATER",
            Modality::MriDixonFat => "MRI_DIXON_FAT",
            Modality::Ct => "CT",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scalar image volume (MRI signal or CT attenuation).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    dims: Dims,
    spacing: VoxelSpacing,
    modality: Modality,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(dims: Dims, spacing: VoxelSpacing, modality: Modality, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(VolumeError::DimensionMismatch(format!(
                "{} samples for dims {dims}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::InvariantViolation(format!(
                "non-finite intensity at voxel {i}"
            )));
        }
        Ok(Self { dims, spacing, modality, data })
    }

    pub fn filled(dims: Dims, spacing: VoxelSpacing, modality: Modality, value: f64) -> Result<Self> {
        Self::new(dims, spacing, modality, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> VoxelSpacing {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.dims.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn with_spacing(mut self, spacing: VoxelSpacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }
}

/// Per-voxel muscle labels: 0 background, 1 left, 2 right.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: VoxelSpacing,
    data: Vec<u8>,
}

pub const MAX_LABEL: u8 = 2;

impl LabelVolume {
    pub fn new(dims: Dims, spacing: VoxelSpacing, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(VolumeError::DimensionMismatch(format!(
                "{} labels for dims {dims}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > MAX_LABEL) {
            return Err(VolumeError::InvariantViolation(format!(
                "label {} at voxel {i} outside {{0,1,2}}",
                data[i]
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: VoxelSpacing) -> Self {
        Self { dims, spacing, data: vec![0; dims.len()] }
    }

    /// Assemble a volume from per-slice label grids (head to foot).
    pub fn from_slices(nx: usize, ny: usize, spacing: VoxelSpacing, slices: &[&[u8]]) -> Result<Self> {
        let dims = Dims::new(nx, ny, slices.len())?;
        let mut data = Vec::with_capacity(dims.len());
        for (z, s) in slices.iter().enumerate() {
            if s.len() != dims.slice_len() {
                return Err(VolumeError::DimensionMismatch(format!(
                    "slice {z} has {} pixels, expected {}",
                    s.len(),
                    dims.slice_len()
                )));
            }
            data.extend_from_slice(s);
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> VoxelSpacing {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.dims.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    pub fn with_spacing(mut self, spacing: VoxelSpacing) -> Self {
        self.spacing = spacing;
        self
    }

    /// Replace slice `z`; the label set is checked.
    pub fn set_slice(&mut self, z: usize, labels: &[u8]) -> Result<()> {
        let n = self.dims.slice_len();
        if labels.len() != n || z >= self.dims.nz {
            return Err(VolumeError::DimensionMismatch(format!(
                "slice {z} with {} pixels into {}",
                labels.len(),
                self.dims
            )));
        }
        if labels.iter().any(|&v| v > MAX_LABEL) {
            return Err(VolumeError::InvariantViolation("label outside {0,1,2}".into()));
        }
        self.data[z * n..(z + 1) * n].copy_from_slice(labels);
        Ok(())
    }

    pub fn same_geometry(&self, other: &LabelVolume) -> bool {
        self.dims == other.dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_rejects_non_positive() {
        assert!(VoxelSpacing::new(1.0, 0.0, 1.0).is_err());
        assert!(VoxelSpacing::new(1.0, 1.0, f64::NAN).is_err());
        assert!(VoxelSpacing::new(0.6875, 0.6875, 5.0).is_ok());
    }

    #[test]
    fn label_volume_rejects_label_three() {
        let dims = Dims::new(2, 2, 1).unwrap();
        let sp = VoxelSpacing::new(1.0, 1.0, 1.0).unwrap();
        assert!(matches!(
            LabelVolume::new(dims, sp, vec![0, 1, 2, 3]),
            Err(VolumeError::InvariantViolation(_))
        ));
    }

    #[test]
    fn scalar_volume_rejects_nan() {
        let dims = Dims::new(1, 1, 2).unwrap();
        let sp = VoxelSpacing::new(1.0, 1.0, 1.0).unwrap();
        assert!(ScalarVolume::new(dims, sp, Modality::Ct, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn modality_serde_names() {
        let s = serde_json::to_string(&Modality::MriDixonWater).unwrap();
        assert_eq!(s, "\"MRI_DIXON_WATER\"");
        let m: Modality = serde_json::from_str("\"CT\"").unwrap();
        assert_eq!(m, Modality::Ct);
    }
}
