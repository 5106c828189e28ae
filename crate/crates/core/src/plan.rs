//! Reference-volume selection and interleaved propagation plans.
//!
//! A plan alternates slices of a fixed, annotated reference volume with
//! slices of one inference volume, head to foot, so that a sequential
//! (video-style) segmenter is re-anchored on the reference between every
//! inference frame.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ScoredMask;
use crate::mask::SliceMask;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("study {study} is missing the {level} feature vector")]
    MissingFeatures { study: String, level: DiscLevel },
    #[error("inconsistent feature vectors: {0}")]
    InconsistentDimensions(String),
    #[error("seed prompt is {got_x}x{got_y}, reference slices are {nx}x{ny}")]
    SeedDimensionMismatch { nx: usize, ny: usize, got_x: usize, got_y: usize },
    #[error("seed prompt must be slice {expected} of {study}: {detail}")]
    SeedMismatch { study: String, expected: usize, detail: String },
    #[error("study {0} has an empty slice range")]
    EmptyRange(String),
    #[error("{results} results for a {frames}-frame plan")]
    LengthMismatch { frames: usize, results: usize },
    #[error("no studies to choose a reference from")]
    NoStudies,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscLevel {
    L3l4,
    L4l5,
    L5s1,
}

impl DiscLevel {
    pub const ALL: [DiscLevel; 3] = [DiscLevel::L3l4, DiscLevel::L4l5, DiscLevel::L5s1];

    pub fn as_str(self) -> &'static str {
        match self {
            DiscLevel::L3l4 => "l3l4",
            DiscLevel::L4l5 => "l4l5",
            DiscLevel::L5s1 => "l5s1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        DiscLevel::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for DiscLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Opaque embedding of one disc-level slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub study_id: String,
    pub level: DiscLevel,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Euclidean distance between L2-normalised vectors (cosine ordering).
    #[default]
    NormalizedEuclidean,
    RawEuclidean,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-study mean (over disc levels) of the mean distance to every other
/// study at the same level.
pub fn reference_scores(
    features: &[FeatureVector],
    metric: DistanceMetric,
) -> Result<BTreeMap<String, f64>, PlanError> {
    let mut by_study: BTreeMap<&str, BTreeMap<DiscLevel, Vec<f64>>> = BTreeMap::new();
    let mut dim = None;
    for f in features {
        if f.values.is_empty() || f.values.iter().any(|v| !v.is_finite()) {
            return Err(PlanError::InconsistentDimensions(format!(
                "{} {} is empty or non-finite",
                f.study_id, f.level
            )));
        }
        if *dim.get_or_insert(f.values.len()) != f.values.len() {
            return Err(PlanError::InconsistentDimensions(format!(
                "{} {} has length {}, expected {}",
                f.study_id,
                f.level,
                f.values.len(),
                dim.unwrap()
            )));
        }
        let v = match metric {
            DistanceMetric::NormalizedEuclidean => normalized(&f.values),
            DistanceMetric::RawEuclidean => f.values.clone(),
        };
        if by_study.entry(&f.study_id).or_default().insert(f.level, v).is_some() {
            return Err(PlanError::InconsistentDimensions(format!(
                "duplicate {} vector for {}",
                f.level, f.study_id
            )));
        }
    }
    for (study, levels) in &by_study {
        if let Some(level) = DiscLevel::ALL.into_iter().find(|l| !levels.contains_key(l)) {
            return Err(PlanError::MissingFeatures { study: study.to_string(), level });
        }
    }
    let studies: Vec<_> = by_study.iter().collect();
    let mut scores = BTreeMap::new();
    for (i, (study, levels)) in studies.iter().enumerate() {
        let mut total = 0.0;
        for level in DiscLevel::ALL {
            let others: Vec<f64> = studies
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, (_, other))| euclidean(&levels[&level], &other[&level]))
                .collect();
            if !others.is_empty() {
                total += others.iter().sum::<f64>() / others.len() as f64;
            }
        }
        scores.insert(study.to_string(), total / DiscLevel::ALL.len() as f64);
    }
    Ok(scores)
}

/// The study with the smallest average feature distance to all others;
/// ties resolve to the lexicographically smallest study id.
pub fn select_reference_volume(features: &[FeatureVector], metric: DistanceMetric) -> Result<String, PlanError> {
    let scores = reference_scores(features, metric)?;
    let mut best: Option<(&String, f64)> = None;
    for (study, &score) in &scores {
        if best.is_none_or(|(_, b)| score < b) {
            best = Some((study, score));
        }
    }
    best.map(|(s, _)| s.clone()).ok_or(PlanError::NoStudies)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameRole {
    Reference,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub study_id: String,
    pub slice_index: usize,
    pub role: FrameRole,
}

/// A study as the planner sees it: in-plane size and the analysed slice range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanStudy {
    pub study_id: String,
    pub nx: usize,
    pub ny: usize,
    pub range: RangeInclusive<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationPlan {
    pub frames: Vec<FrameRef>,
    /// The annotated top slice of the reference volume.
    pub seed: SliceMask,
}

impl PropagationPlan {
    pub fn reference_study(&self) -> &str {
        &self.seed.study_id
    }

    pub fn inference_study(&self) -> Option<&str> {
        self.frames
            .iter()
            .find(|f| f.role == FrameRole::Inference)
            .map(|f| f.study_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Alternate reference and inference slices head to foot; when one stream
/// runs out the rest of the other is appended in order.
pub fn build_interleaved_plan(
    reference: &PlanStudy,
    inference: &PlanStudy,
    seed_mask: &SliceMask,
) -> Result<PropagationPlan, PlanError> {
    for s in [reference, inference] {
        if s.range.is_empty() {
            return Err(PlanError::EmptyRange(s.study_id.clone()));
        }
    }
    if seed_mask.nx != reference.nx || seed_mask.ny != reference.ny || seed_mask.labels.len() != reference.nx * reference.ny {
        return Err(PlanError::SeedDimensionMismatch {
            nx: reference.nx,
            ny: reference.ny,
            got_x: seed_mask.nx,
            got_y: seed_mask.ny,
        });
    }
    let top = *reference.range.start();
    if seed_mask.study_id != reference.study_id || seed_mask.slice_index != top {
        return Err(PlanError::SeedMismatch {
            study: reference.study_id.clone(),
            expected: top,
            detail: format!("got slice {} of {}", seed_mask.slice_index, seed_mask.study_id),
        });
    }
    let mut refs = reference.range.clone().map(|z| FrameRef {
        study_id: reference.study_id.clone(),
        slice_index: z,
        role: FrameRole::Reference,
    });
    let mut infs = inference.range.clone().map(|z| FrameRef {
        study_id: inference.study_id.clone(),
        slice_index: z,
        role: FrameRole::Inference,
    });
    let mut frames = Vec::with_capacity(reference.range.clone().count() + inference.range.clone().count());
    loop {
        match (refs.next(), infs.next()) {
            (None, None) => break,
            (r, i) => frames.extend(r.into_iter().chain(i)),
        }
    }
    Ok(PropagationPlan { frames, seed: seed_mask.clone() })
}

/// Results whose frame has the given role, sorted by slice index.
pub fn demux_frames(plan: &PropagationPlan, results: Vec<ScoredMask>, role: FrameRole) -> Result<Vec<ScoredMask>, PlanError> {
    if results.len() != plan.frames.len() {
        return Err(PlanError::LengthMismatch { frames: plan.frames.len(), results: results.len() });
    }
    let mut out: Vec<ScoredMask> = plan
        .frames
        .iter()
        .zip(results)
        .filter(|(f, _)| f.role == role)
        .map(|(_, r)| r)
        .collect();
    out.sort_by_key(|m| m.frame.slice_index);
    Ok(out)
}

/// Keep only the inference-volume masks, in that volume's slice order.
pub fn demux_inference_frames(plan: &PropagationPlan, results: Vec<ScoredMask>) -> Result<Vec<ScoredMask>, PlanError> {
    demux_frames(plan, results, FrameRole::Inference)
}
