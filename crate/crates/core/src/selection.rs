//! Confidence-based pseudo-label selection and the three-step
//! train / validate / select refinement cascade.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ScoredMask;
use crate::mask::{check_area_ratios, largest_component_per_class, mean_side_dice, MaskStats};
use crate::volume::LabelVolume;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error("coverage mismatch: {0}")]
    CoverageMismatch(String),
    #[error("cascade step {step} selected no studies")]
    CascadeStarved { step: usize },
    #[error("backend failed in cascade step {step}: {message}")]
    Backend { step: usize, message: String },
}

pub type Result<T> = std::result::Result<T, SelectionError>;

fn default_bins() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub p_dataset: f64,
    pub p_slice: f64,
    pub dsc_min: f64,
    pub area_ratio_step2: f64,
    pub area_ratio_step3: f64,
    pub p_step2: f64,
    pub p_step3: f64,
    #[serde(default = "default_bins")]
    pub position_bins: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            p_dataset: 0.10,
            p_slice: 0.02,
            dsc_min: 0.90,
            area_ratio_step2: 1.5,
            area_ratio_step3: 1.25,
            p_step2: 0.10,
            p_step3: 0.20,
            position_bins: default_bins(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SelectionError::InvalidConfig(m));
        for (name, p) in [
            ("p_dataset", self.p_dataset),
            ("p_slice", self.p_slice),
            ("p_step2", self.p_step2),
            ("p_step3", self.p_step3),
        ] {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("{name} = {p} outside (0, 1]"));
            }
        }
        for (name, r) in [("area_ratio_step2", self.area_ratio_step2), ("area_ratio_step3", self.area_ratio_step3)] {
            if !(r >= 1.0) || !r.is_finite() {
                return bad(format!("{name} = {r} must be >= 1"));
            }
        }
        if !(self.dsc_min > 0.0 && self.dsc_min < 1.0) {
            return bad(format!("dsc_min = {} outside (0, 1)", self.dsc_min));
        }
        if self.position_bins == 0 {
            return bad("position_bins must be positive".into());
        }
        Ok(())
    }
}

/// `max(1, ceil(p·n))`, never more than `n`. The small slack keeps products
/// such as 0.1·50 from rounding up to 6.
pub fn top_count(p: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((p * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    LowConfidence,
    LowDsc,
    Smoothness,
    NotTopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub dataset_id: String,
    pub study_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice_index: Option<usize>,
    pub score: f64,
    pub selected: bool,
    pub reasons: Vec<RejectReason>,
}

impl CandidateScore {
    pub fn key(&self) -> String {
        match self.slice_index {
            Some(z) => format!("{}/{}/{z}", self.dataset_id, self.study_id),
            None => format!("{}/{}", self.dataset_id, self.study_id),
        }
    }
}

/// Audit record of one selection step. Field order is fixed so reports can
/// be diffed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub step: usize,
    pub granularity: String,
    pub candidate_count: usize,
    pub selected_count: usize,
    pub thresholds: BTreeMap<String, f64>,
    pub selected: Vec<String>,
    pub candidates: Vec<CandidateScore>,
}

impl SelectionReport {
    fn new(step: usize, granularity: &str, thresholds: BTreeMap<String, f64>, candidates: Vec<CandidateScore>) -> Self {
        let selected: Vec<String> = candidates.iter().filter(|c| c.selected).map(CandidateScore::key).collect();
        Self {
            step,
            granularity: granularity.to_string(),
            candidate_count: candidates.len(),
            selected_count: selected.len(),
            thresholds,
            selected,
            candidates,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// A stage-1 pseudo-label with its position inside the analysed range.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub scored: ScoredMask,
    /// Offset from the first analysed slice.
    pub position: usize,
    /// Number of analysed slices in the study.
    pub depth: usize,
}

impl PseudoLabel {
    pub fn study_id(&self) -> &str {
        &self.scored.mask.study_id
    }

    pub fn slice_index(&self) -> usize {
        self.scored.mask.slice_index
    }

    pub fn confidence(&self) -> f64 {
        self.scored.confidence
    }

    fn bin(&self, bins: usize) -> usize {
        (bins * self.position / self.depth.max(1)).min(bins - 1)
    }
}

/// Confidence descending, then study id and slice index ascending.
fn stage1_order(a: &PseudoLabel, b: &PseudoLabel) -> Ordering {
    b.confidence()
        .total_cmp(&a.confidence())
        .then_with(|| a.study_id().cmp(b.study_id()))
        .then_with(|| a.slice_index().cmp(&b.slice_index()))
}

fn top_indices(items: &[PseudoLabel], idx: &[usize], p: f64) -> Vec<usize> {
    let mut idx = idx.to_vec();
    idx.sort_by(|&i, &j| stage1_order(&items[i], &items[j]));
    idx.truncate(top_count(p, idx.len()));
    idx
}

/// Selected pseudo-labels in pooled order (dataset, then confidence order).
pub type Stage1Selection = Vec<(String, PseudoLabel)>;

/// Per dataset: the top `p_dataset` of all masks by confidence plus the top
/// `p_slice` within each normalized-position bin; datasets are then pooled.
pub fn select_stage1(
    pseudo: &BTreeMap<String, Vec<PseudoLabel>>,
    cfg: &SelectionConfig,
) -> Result<(Stage1Selection, SelectionReport)> {
    cfg.validate()?;
    if pseudo.values().all(Vec::is_empty) {
        return Err(SelectionError::EmptyInput("no stage-1 pseudo-labels".into()));
    }
    let mut pooled = Vec::new();
    let mut candidates = Vec::new();
    for (dataset, items) in pseudo {
        if let Some(bad) = items.iter().find(|p| !(0.0..=1.0).contains(&p.confidence())) {
            return Err(SelectionError::EmptyInput(format!(
                "{}:{} has confidence {}",
                bad.study_id(),
                bad.slice_index(),
                bad.confidence()
            )));
        }
        let all: Vec<usize> = (0..items.len()).collect();
        let mut chosen: BTreeSet<usize> = top_indices(items, &all, cfg.p_dataset).into_iter().collect();
        let mut bins: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in items.iter().enumerate() {
            bins.entry(p.bin(cfg.position_bins)).or_default().push(i);
        }
        for idx in bins.values() {
            chosen.extend(top_indices(items, idx, cfg.p_slice));
        }
        let mut order = all;
        order.sort_by(|&i, &j| stage1_order(&items[i], &items[j]));
        for i in order {
            let p = &items[i];
            let selected = chosen.contains(&i);
            candidates.push(CandidateScore {
                dataset_id: dataset.clone(),
                study_id: p.study_id().to_string(),
                slice_index: Some(p.slice_index()),
                score: p.confidence(),
                selected,
                reasons: if selected { vec![] } else { vec![RejectReason::LowConfidence] },
            });
            if selected {
                pooled.push((dataset.clone(), p.clone()));
            }
        }
    }
    let thresholds = [("p_dataset", cfg.p_dataset), ("p_slice", cfg.p_slice), ("position_bins", cfg.position_bins as f64)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok((pooled, SelectionReport::new(1, "slice", thresholds, candidates)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Validation {
    pub study_id: String,
    pub mean_dsc: f64,
    pub passed: bool,
    pub reasons: Vec<RejectReason>,
}

/// Keep a study when its mean per-slice DSC against `reference` exceeds
/// `dsc_min` and no analysed slice grows past `area_ratio` times the slice
/// above it. Only slices in the study's range are considered.
pub fn validate_predictions(
    pred: &BTreeMap<String, LabelVolume>,
    reference: &BTreeMap<String, LabelVolume>,
    ranges: &BTreeMap<String, RangeInclusive<usize>>,
    dsc_min: f64,
    area_ratio: f64,
) -> Result<Vec<Validation>> {
    if !pred.keys().eq(reference.keys()) {
        return Err(SelectionError::CoverageMismatch("prediction and reference cover different studies".into()));
    }
    pred.par_iter()
        .map(|(id, p)| {
            let r = &reference[id];
            if p.dims() != r.dims() {
                return Err(SelectionError::CoverageMismatch(format!("{id}: prediction and reference dims differ")));
            }
            let range = ranges
                .get(id)
                .cloned()
                .ok_or_else(|| SelectionError::CoverageMismatch(format!("{id}: no analysed range")))?;
            if *range.end() >= p.dims().nz || range.is_empty() {
                return Err(SelectionError::CoverageMismatch(format!("{id}: range outside volume")));
            }
            let n = range.clone().count() as f64;
            let mean_dsc = range
                .clone()
                .map(|z| mean_side_dice(p.slice(z), r.slice(z)).expect("same dims"))
                .sum::<f64>()
                / n;
            let areas: Vec<MaskStats> = range.map(|z| MaskStats::from_labels(p.slice(z), p.spacing())).collect();
            let mut reasons = Vec::new();
            if !(mean_dsc > dsc_min) {
                reasons.push(RejectReason::LowDsc);
            }
            if check_area_ratios(&areas, area_ratio).is_err() {
                reasons.push(RejectReason::Smoothness);
            }
            Ok(Validation { study_id: id.clone(), mean_dsc, passed: reasons.is_empty(), reasons })
        })
        .collect()
}

/// Top `max(1, ceil(p·N))` of `(id, score)` by score descending, id ascending.
pub fn select_top_fraction(scored: &[(String, f64)], p: f64) -> Result<Vec<String>> {
    if scored.is_empty() {
        return Err(SelectionError::EmptyInput("no validated studies".into()));
    }
    let mut v: Vec<&(String, f64)> = scored.iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(v.into_iter().take(top_count(p, scored.len())).map(|(id, _)| id.clone()).collect())
}

/// One training target handed to a cascade backend.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub dataset_id: String,
    pub study_id: String,
    pub slice_index: usize,
    /// Normalized position within the analysed range, in [0, 1].
    pub position: f64,
    pub nx: usize,
    pub ny: usize,
    pub labels: Vec<u8>,
}

pub fn normalized_position(offset: usize, depth: usize) -> f64 {
    if depth > 1 {
        offset as f64 / (depth - 1) as f64
    } else {
        0.0
    }
}

/// Train/predict service used by the cascade. The pipeline implements it over
/// the process protocol; tests use in-process models.
pub trait CascadeBackend: Sync {
    type Model;

    fn train(&self, step: usize, examples: &[TrainingExample]) -> std::result::Result<Self::Model, String>;

    fn predict(
        &self,
        step: usize,
        model: &Self::Model,
        dataset_id: &str,
    ) -> std::result::Result<BTreeMap<String, LabelVolume>, String>;
}

#[derive(Debug, Clone)]
pub struct CascadeStudy {
    pub study_id: String,
    pub range: RangeInclusive<usize>,
    /// Stage-1 pseudo-label per analysed slice, in slice order.
    pub pseudo: Vec<ScoredMask>,
}

#[derive(Debug, Clone)]
pub struct CascadeDataset {
    pub dataset_id: String,
    pub studies: Vec<CascadeStudy>,
    /// Geometry of the volumes the backend predicts.
    pub template: BTreeMap<String, LabelVolume>,
}

impl CascadeDataset {
    pub fn pseudo_labels(&self) -> Vec<PseudoLabel> {
        self.studies
            .iter()
            .flat_map(|s| {
                let depth = s.range.clone().count();
                s.pseudo.iter().map(move |m| PseudoLabel {
                    scored: m.clone(),
                    position: m.mask.slice_index - s.range.start(),
                    depth,
                })
            })
            .collect()
    }

    fn ranges(&self) -> BTreeMap<String, RangeInclusive<usize>> {
        self.studies.iter().map(|s| (s.study_id.clone(), s.range.clone())).collect()
    }

    /// Pseudo-labels assembled into volumes, zero outside the analysed range.
    pub fn pseudo_volumes(&self) -> Result<BTreeMap<String, LabelVolume>> {
        self.studies
            .iter()
            .map(|s| {
                let mut vol = self
                    .template
                    .get(&s.study_id)
                    .ok_or_else(|| SelectionError::CoverageMismatch(format!("no geometry for {}", s.study_id)))?
                    .clone();
                vol = LabelVolume::zeros(vol.dims(), vol.spacing());
                for m in &s.pseudo {
                    vol.set_slice(m.mask.slice_index, &m.mask.labels)
                        .map_err(|e| SelectionError::CoverageMismatch(format!("{}: {e}", s.study_id)))?;
                }
                Ok((s.study_id.clone(), vol))
            })
            .collect()
    }
}

pub struct CascadeOutcome<M> {
    pub final_masks: BTreeMap<String, BTreeMap<String, LabelVolume>>,
    pub reports: Vec<SelectionReport>,
    pub models: Vec<M>,
    /// Stage-1 pseudo-labels as volumes, kept for comparison.
    pub pseudo: BTreeMap<String, BTreeMap<String, LabelVolume>>,
}

fn examples_from_volumes(
    dataset: &CascadeDataset,
    volumes: &BTreeMap<String, LabelVolume>,
    studies: &[String],
) -> Vec<TrainingExample> {
    let ranges = dataset.ranges();
    let mut out = Vec::new();
    for id in studies {
        let (vol, range) = (&volumes[id], &ranges[id]);
        let depth = range.clone().count();
        for z in range.clone() {
            out.push(TrainingExample {
                dataset_id: dataset.dataset_id.clone(),
                study_id: id.clone(),
                slice_index: z,
                position: normalized_position(z - range.start(), depth),
                nx: vol.dims().nx,
                ny: vol.dims().ny,
                labels: vol.slice(z).to_vec(),
            });
        }
    }
    out
}

type Predictions = BTreeMap<String, BTreeMap<String, LabelVolume>>;

fn predict_all<B: CascadeBackend>(
    backend: &B,
    step: usize,
    model: &B::Model,
    datasets: &[CascadeDataset],
) -> Result<Predictions>
where
    B::Model: Sync,
{
    datasets
        .iter()
        .map(|d| {
            let pred = backend
                .predict(step, model, &d.dataset_id)
                .map_err(|message| SelectionError::Backend { step, message })?;
            if !pred.keys().eq(d.template.keys()) {
                return Err(SelectionError::CoverageMismatch(format!(
                    "step {step}: predictions for {} do not cover its studies",
                    d.dataset_id
                )));
            }
            Ok((d.dataset_id.clone(), pred))
        })
        .collect()
}

fn validation_step(
    step: usize,
    datasets: &[CascadeDataset],
    pred: &Predictions,
    reference: &Predictions,
    dsc_min: f64,
    area_ratio: f64,
    p: f64,
) -> Result<(Vec<TrainingExample>, SelectionReport)> {
    let mut candidates = Vec::new();
    let mut examples = Vec::new();
    for d in datasets {
        let id = &d.dataset_id;
        let vals = validate_predictions(&pred[id], &reference[id], &d.ranges(), dsc_min, area_ratio)?;
        let passed: Vec<(String, f64)> =
            vals.iter().filter(|v| v.passed).map(|v| (v.study_id.clone(), v.mean_dsc)).collect();
        let chosen = if passed.is_empty() { vec![] } else { select_top_fraction(&passed, p)? };
        let mut vals = vals;
        vals.sort_by(|a, b| b.mean_dsc.total_cmp(&a.mean_dsc).then_with(|| a.study_id.cmp(&b.study_id)));
        for v in vals {
            let selected = chosen.contains(&v.study_id);
            let mut reasons = v.reasons.clone();
            if v.passed && !selected {
                reasons.push(RejectReason::NotTopK);
            }
            candidates.push(CandidateScore {
                dataset_id: id.clone(),
                study_id: v.study_id.clone(),
                slice_index: None,
                score: v.mean_dsc,
                selected,
                reasons,
            });
        }
        examples.extend(examples_from_volumes(d, &pred[id], &chosen));
    }
    let thresholds = [("dsc_min", dsc_min), ("area_ratio", area_ratio), ("p", p)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let report = SelectionReport::new(step, "study", thresholds, candidates);
    if report.selected_count == 0 {
        return Err(SelectionError::CascadeStarved { step });
    }
    Ok((examples, report))
}

/// Run the three-step cascade. `on_report` sees each step's report as soon as
/// it exists, so a failing later step still leaves earlier reports behind.
pub fn run_cascade<B: CascadeBackend>(
    datasets: &[CascadeDataset],
    backend: &B,
    cfg: &SelectionConfig,
    mut on_report: impl FnMut(&SelectionReport),
) -> Result<CascadeOutcome<B::Model>>
where
    B::Model: Sync,
{
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(SelectionError::EmptyInput("no datasets".into()));
    }
    let pseudo_labels: BTreeMap<String, Vec<PseudoLabel>> =
        datasets.iter().map(|d| (d.dataset_id.clone(), d.pseudo_labels())).collect();
    let pseudo: Predictions =
        datasets.iter().map(|d| Ok((d.dataset_id.clone(), d.pseudo_volumes()?))).collect::<Result<_>>()?;

    let (selected, report1) = select_stage1(&pseudo_labels, cfg)?;
    on_report(&report1);
    let examples1: Vec<TrainingExample> = selected
        .iter()
        .map(|(dataset_id, p)| TrainingExample {
            dataset_id: dataset_id.clone(),
            study_id: p.study_id().to_string(),
            slice_index: p.slice_index(),
            position: normalized_position(p.position, p.depth),
            nx: p.scored.mask.nx,
            ny: p.scored.mask.ny,
            labels: p.scored.mask.labels.clone(),
        })
        .collect();
    let train = |step: usize, ex: &[TrainingExample]| {
        backend.train(step, ex).map_err(|message| SelectionError::Backend { step, message })
    };
    let model1 = train(1, &examples1)?;
    let pred1 = predict_all(backend, 1, &model1, datasets)?;

    let (examples2, report2) =
        validation_step(2, datasets, &pred1, &pseudo, cfg.dsc_min, cfg.area_ratio_step2, cfg.p_step2)?;
    on_report(&report2);
    let model2 = train(2, &examples2)?;
    let pred2 = predict_all(backend, 2, &model2, datasets)?;

    let (examples3, report3) =
        validation_step(3, datasets, &pred2, &pred1, cfg.dsc_min, cfg.area_ratio_step3, cfg.p_step3)?;
    on_report(&report3);
    let model3 = train(3, &examples3)?;
    let pred3 = predict_all(backend, 3, &model3, datasets)?;
    let final_masks = pred3
        .into_iter()
        .map(|(d, vols)| (d, vols.into_iter().map(|(s, v)| (s, largest_component_per_class(&v))).collect()))
        .collect();
    Ok(CascadeOutcome {
        final_masks,
        reports: vec![report1, report2, report3],
        models: vec![model1, model2, model3],
        pseudo,
    })
}
