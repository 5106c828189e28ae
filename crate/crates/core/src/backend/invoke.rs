use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::wire::{
    self, confidence_path, frame_mask_path, prediction_path, read_confidence_csv, read_features_csv, PlanFile,
};
use super::{run_backend, BackendDescriptor, BackendError, BackendKind, ScoredMask};
use crate::mask::{largest_component_per_class, SliceMask};
use crate::plan::{DiscLevel, FeatureVector};
use crate::volume::{write_mask_slice, DatasetManifest, LabelVolume, MAX_LABEL};

pub use super::wire::TrainingPair;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingJob {
    pub job_id: String,
    pub pairs: Vec<TrainingPair>,
    pub model_out: PathBuf,
}

impl TrainingJob {
    pub fn validate(&self) -> Result<(), BackendError> {
        let first = self
            .pairs
            .first()
            .ok_or_else(|| BackendError::Precondition(format!("training job {} has no pairs", self.job_id)))?;
        if let Some(p) = self.pairs.iter().find(|p| (p.nx, p.ny) != (first.nx, first.ny)) {
            return Err(BackendError::Precondition(format!(
                "training job {}: pair {}:{} is {}x{}, expected {}x{}",
                self.job_id, p.study_id, p.slice_index, p.nx, p.ny, first.nx, first.ny
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelHandle {
    pub path: PathBuf,
}

fn fresh_dir(dir: &Path) -> Result<(), BackendError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| BackendError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| BackendError::io(dir, e))
}

/// Check a segmentation output directory against the plan it was produced for.
pub fn validate_segmentation_result(dir: &Path, plan: &PlanFile) -> Result<Vec<ScoredMask>, BackendError> {
    let confidences = read_confidence_csv(&confidence_path(dir), plan.frames.len())?;
    plan.frame_refs()
        .into_iter()
        .zip(&plan.frames)
        .zip(confidences)
        .enumerate()
        .map(|(k, ((frame, pf), confidence))| {
            let path = frame_mask_path(dir, k);
            let labels = fs::read(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => BackendError::violation(format!("missing mask for frame {k}")),
                _ => BackendError::io(&path, e),
            })?;
            if labels.len() != pf.nx * pf.ny {
                return Err(BackendError::violation(format!(
                    "frame {k}: mask has {} pixels, plan expects {}x{}",
                    labels.len(),
                    pf.nx,
                    pf.ny
                )));
            }
            if let Some(v) = labels.iter().find(|&&v| v > MAX_LABEL) {
                return Err(BackendError::violation(format!("frame {k}: label {v} outside {{0,1,2}}")));
            }
            let mask = SliceMask {
                study_id: frame.study_id.clone(),
                slice_index: frame.slice_index,
                nx: pf.nx,
                ny: pf.ny,
                labels,
            };
            Ok(ScoredMask { frame, mask, confidence })
        })
        .collect()
}

/// Serialize the plan and prompt into `io_dir`, run the segmenter and
/// validate what it wrote to `io_dir/out`.
pub fn invoke_segmentation(
    desc: &BackendDescriptor,
    plan: &PlanFile,
    prompt: &SliceMask,
    io_dir: &Path,
) -> Result<Vec<ScoredMask>, BackendError> {
    desc.expect_kind(BackendKind::Segment)?;
    fs::create_dir_all(io_dir).map_err(|e| BackendError::io(io_dir, e))?;
    let plan_path = io_dir.join("plan.json");
    let prompt_path = io_dir.join("prompt.mask");
    let out = io_dir.join("out");
    plan.write(&plan_path)?;
    write_mask_slice(&prompt_path, &prompt.labels)?;
    fresh_dir(&out)?;
    run_backend(
        desc,
        [
            "segment".as_ref(),
            "--plan".as_ref(),
            plan_path.as_os_str(),
            "--prompt".as_ref(),
            prompt_path.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ],
    )?;
    validate_segmentation_result(&out, plan)
}

/// Run the feature extractor; every study must come back with exactly one
/// vector per disc level, all of one length.
pub fn invoke_features(
    desc: &BackendDescriptor,
    manifest_path: &Path,
    studies: &[String],
    io_dir: &Path,
) -> Result<Vec<FeatureVector>, BackendError> {
    desc.expect_kind(BackendKind::Features)?;
    if studies.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(io_dir).map_err(|e| BackendError::io(io_dir, e))?;
    let out = io_dir.join("features.csv");
    if out.exists() {
        fs::remove_file(&out).map_err(|e| BackendError::io(&out, e))?;
    }
    run_backend(
        desc,
        ["features".as_ref(), "--manifest".as_ref(), manifest_path.as_os_str(), "--out".as_ref(), out.as_os_str()],
    )?;
    let features = read_features_csv(&out)?;
    check_features(&features, studies)?;
    Ok(features)
}

fn check_features(features: &[FeatureVector], studies: &[String]) -> Result<(), BackendError> {
    let wanted: BTreeSet<&str> = studies.iter().map(String::as_str).collect();
    let mut seen: BTreeMap<&str, BTreeSet<DiscLevel>> = BTreeMap::new();
    let dim = features.first().map(|f| f.values.len()).unwrap_or(0);
    for f in features {
        if f.values.len() != dim || dim == 0 {
            return Err(BackendError::violation(format!(
                "feature vector {} {} has length {}, expected {dim}",
                f.study_id,
                f.level,
                f.values.len()
            )));
        }
        if !wanted.contains(f.study_id.as_str()) {
            return Err(BackendError::violation(format!("features for unknown study {}", f.study_id)));
        }
        if !seen.entry(&f.study_id).or_default().insert(f.level) {
            return Err(BackendError::violation(format!("duplicate {} vector for {}", f.level, f.study_id)));
        }
    }
    for s in &wanted {
        let n = seen.get(s).map_or(0, BTreeSet::len);
        if n != DiscLevel::ALL.len() {
            return Err(BackendError::violation(format!("study {s} has {n} of 3 disc-level vectors")));
        }
    }
    Ok(())
}

pub fn invoke_training(desc: &BackendDescriptor, job: &TrainingJob, io_dir: &Path) -> Result<ModelHandle, BackendError> {
    desc.expect_kind(BackendKind::TrainPredict)?;
    job.validate()?;
    let pairs = io_dir.join(format!("{}_pairs.csv", job.job_id));
    wire::write_pairs_csv(&pairs, &job.pairs)?;
    if let Some(parent) = job.model_out.parent() {
        fs::create_dir_all(parent).map_err(|e| BackendError::io(parent, e))?;
    }
    if job.model_out.exists() {
        fs::remove_file(&job.model_out).map_err(|e| BackendError::io(&job.model_out, e))?;
    }
    run_backend(
        desc,
        ["train".as_ref(), "--pairs".as_ref(), pairs.as_os_str(), "--model-out".as_ref(), job.model_out.as_os_str()],
    )?;
    if !job.model_out.is_file() {
        return Err(BackendError::violation(format!("trainer wrote no model at {}", job.model_out.display())));
    }
    Ok(ModelHandle { path: job.model_out.clone() })
}

/// Predict every study of `manifest`; each prediction is reduced to the
/// largest connected component per class before it is returned.
pub fn invoke_predict(
    desc: &BackendDescriptor,
    model: &ModelHandle,
    manifest: &DatasetManifest,
    manifest_path: &Path,
    out_dir: &Path,
) -> Result<BTreeMap<String, LabelVolume>, BackendError> {
    desc.expect_kind(BackendKind::TrainPredict)?;
    fresh_dir(out_dir)?;
    run_backend(
        desc,
        [
            "predict".as_ref(),
            "--model".as_ref(),
            model.path.as_os_str(),
            "--manifest".as_ref(),
            manifest_path.as_os_str(),
            "--out".as_ref(),
            out_dir.as_os_str(),
        ],
    )?;
    manifest
        .studies
        .iter()
        .map(|s| {
            let path = prediction_path(out_dir, &s.study_id);
            if !path.is_file() {
                return Err(BackendError::violation(format!("missing prediction for study {}", s.study_id)));
            }
            let vol = crate::volume::read_label_volume(&path, s.dims, s.spacing)
                .map_err(|e| BackendError::violation(format!("prediction for {}: {e}", s.study_id)))?;
            Ok((s.study_id.clone(), largest_component_per_class(&vol)))
        })
        .collect()
}
