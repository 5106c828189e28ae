//! On-disk formats exchanged with backends.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::plan::{DiscLevel, FeatureVector, FrameRef, FrameRole, PropagationPlan};

pub const CONFIDENCE_HEADER: &str = "frame_index,confidence";
pub const PAIRS_HEADER: &str = "study_id,slice_index,position,nx,ny,image,mask";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFrame {
    pub study_id: String,
    pub slice_index: usize,
    pub role: FrameRole,
    pub nx: usize,
    pub ny: usize,
    /// Standardized image slice (i16 raw) for this frame.
    pub image: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRef {
    pub study_id: String,
    pub slice_index: usize,
}

/// Serialized propagation plan handed to a segmentation backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub dataset_id: String,
    /// Manifest of the standardized dataset the frames come from.
    pub manifest: PathBuf,
    pub seed: SeedRef,
    pub frames: Vec<PlanFrame>,
}

impl PlanFile {
    /// Attach image paths and geometry to an in-memory plan.
    pub fn from_plan(
        dataset_id: &str,
        manifest: &Path,
        plan: &PropagationPlan,
        mut frame_info: impl FnMut(&FrameRef) -> (usize, usize, PathBuf),
    ) -> Self {
        let frames = plan
            .frames
            .iter()
            .map(|f| {
                let (nx, ny, image) = frame_info(f);
                PlanFrame { study_id: f.study_id.clone(), slice_index: f.slice_index, role: f.role, nx, ny, image }
            })
            .collect();
        PlanFile {
            dataset_id: dataset_id.to_string(),
            manifest: manifest.to_path_buf(),
            seed: SeedRef { study_id: plan.seed.study_id.clone(), slice_index: plan.seed.slice_index },
            frames,
        }
    }

    pub fn frame_refs(&self) -> Vec<FrameRef> {
        self.frames
            .iter()
            .map(|f| FrameRef { study_id: f.study_id.clone(), slice_index: f.slice_index, role: f.role })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|e| BackendError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| BackendError::violation(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<(), BackendError> {
        let text = serde_json::to_string_pretty(self).expect("plan serializes");
        write_text(path, &(text + "\n"))
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), BackendError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| BackendError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| BackendError::io(path, e))
}

fn read_text(path: &Path) -> Result<String, BackendError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => BackendError::violation(format!("missing output {}", path.display())),
        _ => BackendError::io(path, e),
    })
}

pub fn frame_mask_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("frame_{k}.mask"))
}

pub fn confidence_path(dir: &Path) -> PathBuf {
    dir.join("confidence.csv")
}

pub fn prediction_path(dir: &Path, study_id: &str) -> PathBuf {
    dir.join(format!("{study_id}.mask"))
}

pub fn write_confidence_csv(path: &Path, confidences: &[f64]) -> Result<(), BackendError> {
    let mut text = format!("{CONFIDENCE_HEADER}\n");
    for (k, c) in confidences.iter().enumerate() {
        writeln!(text, "{k},{c}").unwrap();
    }
    write_text(path, &text)
}

/// Parse `confidence.csv`, requiring exactly one in-range row per frame.
pub fn read_confidence_csv(path: &Path, n_frames: usize) -> Result<Vec<f64>, BackendError> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CONFIDENCE_HEADER) {
        return Err(BackendError::violation(format!("{}: header must be {CONFIDENCE_HEADER}", path.display())));
    }
    let mut out = vec![None; n_frames];
    for (row, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (k, c) = line
            .split_once(',')
            .ok_or_else(|| BackendError::violation(format!("confidence row {row}: expected two fields")))?;
        let k: usize = k
            .trim()
            .parse()
            .map_err(|_| BackendError::violation(format!("confidence row {row}: bad frame index {k:?}")))?;
        let c: f64 = c
            .trim()
            .parse()
            .map_err(|_| BackendError::violation(format!("confidence row {row}: bad value {c:?}")))?;
        if k >= n_frames {
            return Err(BackendError::violation(format!("confidence for frame {k} outside plan of {n_frames}")));
        }
        if !(c.is_finite() && (0.0..=1.0).contains(&c)) {
            return Err(BackendError::violation(format!("frame {k}: confidence {c} outside [0, 1]")));
        }
        if out[k].replace(c).is_some() {
            return Err(BackendError::violation(format!("frame {k}: duplicate confidence")));
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(k, c)| c.ok_or_else(|| BackendError::violation(format!("missing confidence for frame {k}"))))
        .collect()
}

pub fn write_features_csv(path: &Path, features: &[FeatureVector]) -> Result<(), BackendError> {
    let dim = features.first().map_or(0, |f| f.values.len());
    let mut text = String::from("study_id,disc");
    for i in 0..dim {
        write!(text, ",dim{i}").unwrap();
    }
    text.push('\n');
    for f in features {
        text.push_str(&f.study_id);
        text.push(',');
        text.push_str(f.level.as_str());
        for v in &f.values {
            write!(text, ",{v}").unwrap();
        }
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureVector>, BackendError> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("study_id,disc") {
        return Err(BackendError::violation("features.csv header must start with study_id,disc"));
    }
    let mut out = Vec::new();
    for (row, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.split(',');
        let study_id = fields.next().unwrap_or_default().trim().to_string();
        let level = fields
            .next()
            .and_then(|l| DiscLevel::parse(l.trim()))
            .ok_or_else(|| BackendError::violation(format!("features row {row}: bad disc level")))?;
        let values = fields
            .map(|v| v.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| BackendError::violation(format!("features row {row}: non-numeric value")))?;
        out.push(FeatureVector { study_id, level, values });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub study_id: String,
    pub slice_index: usize,
    /// Normalized position of the slice within its analysed range, in [0, 1].
    pub position: f64,
    pub nx: usize,
    pub ny: usize,
    pub image: PathBuf,
    pub mask: PathBuf,
}

pub fn write_pairs_csv(path: &Path, pairs: &[TrainingPair]) -> Result<(), BackendError> {
    let mut text = format!("{PAIRS_HEADER}\n");
    for p in pairs {
        for s in [&p.image, &p.mask] {
            if s.to_string_lossy().contains([',', '\n']) {
                return Err(BackendError::Precondition(format!("path {} contains a delimiter", s.display())));
            }
        }
        writeln!(
            text,
            "{},{},{},{},{},{},{}",
            p.study_id,
            p.slice_index,
            p.position,
            p.nx,
            p.ny,
            p.image.display(),
            p.mask.display()
        )
        .unwrap();
    }
    write_text(path, &text)
}

pub fn read_pairs_csv(path: &Path) -> Result<Vec<TrainingPair>, BackendError> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(PAIRS_HEADER) {
        return Err(BackendError::violation(format!("pairs listing header must be {PAIRS_HEADER}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(row, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || BackendError::violation(format!("pairs row {row}: malformed"));
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(TrainingPair {
                study_id: f[0].to_string(),
                slice_index: f[1].parse().map_err(|_| bad())?,
                position: f[2].parse().map_err(|_| bad())?,
                nx: f[3].parse().map_err(|_| bad())?,
                ny: f[4].parse().map_err(|_| bad())?,
                image: PathBuf::from(f[5]),
                mask: PathBuf::from(f[6]),
            })
        })
        .collect()
}

/// Study ids in a feature listing, for coverage checks.
pub fn feature_studies(features: &[FeatureVector]) -> BTreeSet<&str> {
    features.iter().map(|f| f.study_id.as_str()).collect()
}
