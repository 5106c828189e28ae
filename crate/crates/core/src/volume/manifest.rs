//! Dataset manifests (JSON) and study loading.
//!
//! File paths inside a manifest are resolved relative to the manifest's own
//! directory, so a dataset directory can be moved as a unit.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::preprocess::{downsample_axial, remap_disc_indices};
use super::raw::{read_mask_slices, read_slices_i16};
use super::{Dims, LabelVolume, Modality, Result, ScalarVolume, VolumeError, VoxelSpacing};

/// Slice indices of the three intervertebral disc levels bounding the
/// analysed range (head to foot).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscIndices {
    pub l3l4: usize,
    pub l4l5: usize,
    pub l5s1: usize,
}

impl DiscIndices {
    pub fn as_array(&self) -> [usize; 3] {
        [self.l3l4, self.l4l5, self.l5s1]
    }

    pub fn validate(&self, nz: usize) -> Result<()> {
        let [a, b, c] = self.as_array();
        if !(a < b && b < c) {
            return Err(VolumeError::InvariantViolation(format!(
                "disc indices ({a}, {b}, {c}) are not strictly increasing"
            )));
        }
        if c >= nz {
            return Err(VolumeError::InvariantViolation(format!(
                "disc index {c} outside [0, {nz})"
            )));
        }
        Ok(())
    }

    /// Inclusive analysed slice range, L3/L4 through L5/S1.
    pub fn range(&self) -> std::ops::RangeInclusive<usize> {
        self.l3l4..=self.l5s1
    }

    pub fn range_len(&self) -> usize {
        self.l5s1 - self.l3l4 + 1
    }

    pub fn level_names() -> [&'static str; 3] {
        ["l3l4", "l4l5", "l5s1"]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DixonPair {
    /// Fat-image slices, voxel-aligned with the study's water slices.
    pub fat_slices: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyManifest {
    pub study_id: String,
    pub modality: Modality,
    pub spacing: VoxelSpacing,
    pub dims: Dims,
    pub slices: Vec<PathBuf>,
    pub disc_indices: DiscIndices,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dixon_pair: Option<DixonPair>,
    /// Reference annotation, one 8-bit label file per slice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manual_masks: Option<Vec<PathBuf>>,
    /// Subject and acquisition phase for repeated-measures designs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Percentile clip for MRI, fixed HU window for CT.
    #[default]
    Auto,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleScope {
    #[default]
    PerVolume,
    PerSlice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    Integer,
    Float,
}

fn default_downsample() -> usize {
    1
}

fn default_target_size() -> usize {
    256
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessProfile {
    #[serde(default)]
    pub clip: ClipMode,
    #[serde(default = "default_downsample")]
    pub downsample: usize,
    #[serde(default = "default_target_size")]
    pub target_size: usize,
    #[serde(default)]
    pub rescale: RescaleScope,
    #[serde(default)]
    pub rounding: Rounding,
}

impl Default for PreprocessProfile {
    fn default() -> Self {
        Self {
            clip: ClipMode::Auto,
            downsample: 1,
            target_size: 256,
            rescale: RescaleScope::PerVolume,
            rounding: Rounding::Integer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub modality: Modality,
    #[serde(default)]
    pub preprocessing: PreprocessProfile,
    pub studies: Vec<StudyManifest>,
}

impl DatasetManifest {
    pub fn study(&self, study_id: &str) -> Option<&StudyManifest> {
        self.studies.iter().find(|s| s.study_id == study_id)
    }

    /// Check every manifest invariant, including existence of referenced files.
    pub fn validate(&self) -> Result<()> {
        if self.dataset_id.trim().is_empty() {
            return Err(VolumeError::SchemaViolation("dataset_id is empty".into()));
        }
        if self.preprocessing.downsample == 0 || self.preprocessing.target_size == 0 {
            return Err(VolumeError::InvariantViolation(
                "downsample and target_size must be positive".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for study in &self.studies {
            if !seen.insert(study.study_id.as_str()) {
                return Err(VolumeError::InvariantViolation(format!(
                    "duplicate study_id {}",
                    study.study_id
                )));
            }
            if study.modality != self.modality {
                return Err(VolumeError::InvariantViolation(format!(
                    "study {} has modality {}, dataset is {}",
                    study.study_id, study.modality, self.modality
                )));
            }
            study.validate()?;
        }
        Ok(())
    }
}

impl StudyManifest {
    pub fn validate(&self) -> Result<()> {
        let nz = self.dims.nz;
        let id = &self.study_id;
        if id.trim().is_empty() || id.contains(['/', '\\', ',']) {
            return Err(VolumeError::SchemaViolation(format!("invalid study_id {id:?}")));
        }
        if self.slices.len() != nz {
            return Err(VolumeError::InvariantViolation(format!(
                "study {id}: {} slices listed for nz = {nz}",
                self.slices.len()
            )));
        }
        self.disc_indices
            .validate(nz)
            .map_err(|e| VolumeError::InvariantViolation(format!("study {id}: {e}")))?;
        if let Some(masks) = &self.manual_masks {
            if masks.len() != nz {
                return Err(VolumeError::InvariantViolation(format!(
                    "study {id}: {} manual masks for nz = {nz}",
                    masks.len()
                )));
            }
        }
        if let Some(pair) = &self.dixon_pair {
            if self.modality != Modality::MriDixonWater {
                return Err(VolumeError::InvariantViolation(format!(
                    "study {id}: dixon_pair requires MRI_DIXON_WATER"
                )));
            }
            if pair.fat_slices.len() != nz {
                return Err(VolumeError::InvariantViolation(format!(
                    "study {id}: {} fat slices for nz = {nz}",
                    pair.fat_slices.len()
                )));
            }
        }
        for path in self.referenced_files() {
            if !path.is_file() {
                return Err(VolumeError::MissingFile(path.clone()));
            }
        }
        Ok(())
    }

    pub fn referenced_files(&self) -> impl Iterator<Item = &PathBuf> {
        self.slices
            .iter()
            .chain(self.manual_masks.iter().flatten())
            .chain(self.dixon_pair.iter().flat_map(|p| p.fat_slices.iter()))
    }

    fn map_paths(&mut self, f: impl Fn(&Path) -> PathBuf) {
        for p in self.slices.iter_mut() {
            *p = f(p);
        }
        for p in self.manual_masks.iter_mut().flatten() {
            *p = f(p);
        }
        for p in self.dixon_pair.iter_mut().flat_map(|d| d.fat_slices.iter_mut()) {
            *p = f(p);
        }
    }
}

/// Read, resolve and validate a dataset manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| VolumeError::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| VolumeError::SchemaViolation(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for study in &mut manifest.studies {
        study.map_paths(|p| if p.is_absolute() { p.to_path_buf() } else { base.join(p) });
    }
    manifest.validate()?;
    Ok(manifest)
}

/// Write a manifest as pretty JSON, storing paths relative to its directory
/// where possible.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = manifest.clone();
    for study in &mut out.studies {
        study.map_paths(|p| p.strip_prefix(&base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf()));
    }
    let text = serde_json::to_string_pretty(&out).map_err(|e| VolumeError::SchemaViolation(e.to_string()))?;
    if !base.as_os_str().is_empty() {
        fs::create_dir_all(&base).map_err(|e| VolumeError::io(&base, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| VolumeError::io(path, e))
}

/// A study loaded into memory with the dataset's axial downsampling applied.
#[derive(Debug, Clone)]
pub struct StudyData {
    pub study_id: String,
    pub subject_id: Option<String>,
    pub phase: Option<String>,
    /// Unclipped intensities (raw HU for CT); quantification reads these.
    pub image: ScalarVolume,
    pub fat: Option<ScalarVolume>,
    pub manual: Option<LabelVolume>,
    pub disc: DiscIndices,
}

pub fn load_study(dataset: &DatasetManifest, study: &StudyManifest) -> Result<StudyData> {
    let factor = dataset.preprocessing.downsample;
    let image = read_slices_i16(&study.slices, study.dims, study.spacing, study.modality)?;
    let fat = study
        .dixon_pair
        .as_ref()
        .map(|p| read_slices_i16(&p.fat_slices, study.dims, study.spacing, Modality::MriDixonFat))
        .transpose()?;
    let manual = study
        .manual_masks
        .as_ref()
        .map(|m| read_mask_slices(m, study.dims, study.spacing))
        .transpose()?;
    let image = downsample_axial(&image, factor)?;
    let nz = image.dims().nz;
    Ok(StudyData {
        study_id: study.study_id.clone(),
        subject_id: study.subject_id.clone(),
        phase: study.phase.clone(),
        fat: fat.map(|f| downsample_axial(&f, factor)).transpose()?,
        manual: manual.map(|m| downsample_axial(&m, factor)).transpose()?,
        disc: remap_disc_indices(study.disc_indices, factor, nz)?,
        image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::raw::{write_mask_slices, write_slices_i16};

    fn write_study(dir: &Path, id: &str, nz: usize) -> StudyManifest {
        let dims = Dims::new(2, 2, nz).unwrap();
        let spacing = VoxelSpacing::new(1.0, 1.0, 5.0).unwrap();
        let vol = ScalarVolume::new(dims, spacing, Modality::Ct, (0..dims.len()).map(|v| v as f64).collect()).unwrap();
        let slices = write_slices_i16(&vol, &dir.join(id), "img").unwrap();
        let masks = write_mask_slices(&LabelVolume::zeros(dims, spacing), &dir.join(id), "mask").unwrap();
        StudyManifest {
            study_id: id.into(),
            modality: Modality::Ct,
            spacing,
            dims,
            slices,
            disc_indices: DiscIndices { l3l4: 0, l4l5: 1, l5s1: nz - 1 },
            dixon_pair: None,
            manual_masks: Some(masks),
            subject_id: None,
            phase: None,
        }
    }

    fn two_study_manifest(dir: &Path) -> DatasetManifest {
        DatasetManifest {
            dataset_id: "ct_demo".into(),
            modality: Modality::Ct,
            preprocessing: PreprocessProfile::default(),
            studies: vec![write_study(dir, "s01", 4), write_study(dir, "s02", 4)],
        }
    }

    #[test]
    fn round_trip_two_study_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = two_study_manifest(dir.path());
        let path = dir.path().join("manifest.json");
        write_manifest(&m, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"s01/img_000.raw\""), "paths stored relative");
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.studies.len(), 2);
        assert_eq!(back, m);
    }

    #[test]
    fn unordered_disc_indices_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = two_study_manifest(dir.path());
        for s in &mut m.studies {
            let paths = (0..10).map(|z| s.slices[0].with_file_name(format!("img_{z:03}.raw"))).collect::<Vec<_>>();
            s.dims = Dims::new(2, 2, 10).unwrap();
            s.slices = paths;
            s.manual_masks = None;
        }
        m.studies[0].disc_indices = DiscIndices { l3l4: 5, l4l5: 3, l5s1: 9 };
        let path = dir.path().join("manifest.json");
        write_manifest(&m, &path).unwrap();
        assert!(matches!(load_manifest(&path), Err(VolumeError::InvariantViolation(_))));
    }

    #[test]
    fn absent_slice_file_is_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = two_study_manifest(dir.path());
        let path = dir.path().join("manifest.json");
        write_manifest(&m, &path).unwrap();
        fs::remove_file(dir.path().join("s02/img_002.raw")).unwrap();
        assert!(matches!(load_manifest(&path), Err(VolumeError::MissingFile(p)) if p.ends_with("s02/img_002.raw")));
    }

    #[test]
    fn wrong_field_type_is_schema_violation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"{"dataset_id": 3, "modality": "CT", "studies": []}"#).unwrap();
        assert!(matches!(load_manifest(&path), Err(VolumeError::SchemaViolation(_))));
        fs::write(&path, r#"{"modality": "CT", "studies": []}"#).unwrap();
        assert!(matches!(load_manifest(&path), Err(VolumeError::SchemaViolation(_))));
    }

    #[test]
    fn mixed_modalities_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = two_study_manifest(dir.path());
        m.studies[1].modality = Modality::MriT1w;
        assert!(matches!(m.validate(), Err(VolumeError::InvariantViolation(_))));
    }

    #[test]
    fn load_study_applies_downsampling() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = two_study_manifest(dir.path());
        m.preprocessing.downsample = 2;
        let s = load_study(&m, &m.studies[0]).unwrap();
        assert_eq!(s.image.dims().nz, 2);
        assert_eq!(s.image.spacing().dz, 10.0);
        assert_eq!(s.manual.unwrap().dims().nz, 2);
        // (0, 1, 3) halves to (0, 0.5, 1.5); ties go to the superior slice
        assert_eq!(s.disc, DiscIndices { l3l4: 0, l4l5: 0, l5s1: 1 });
    }
}
