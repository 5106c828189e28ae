//! Stand-in feature and train/predict backends.

use std::collections::BTreeMap;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PhantomError, Result};
use crate::backend::wire::{prediction_path, read_pairs_csv, write_features_csv};
use crate::plan::{DiscLevel, FeatureVector};
use crate::selection::{normalized_position, CascadeBackend, CascadeDataset, TrainingExample};
use crate::volume::{load_manifest, DatasetManifest};
use crate::volume::{read_mask_slice, read_slices_i16, write_label_volume};
use crate::volume::{Dims, LabelVolume, VoxelSpacing};

/// Mean and variance (scaled to the 8-bit range) and the fraction of pixels
/// above the slice's min-max midpoint.
pub fn slice_features(slice: &[f64]) -> [f64; 3] {
    let n = slice.len() as f64;
    let mean = slice.iter().sum::<f64>() / n;
    let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mid = (lo + hi) / 2.0;
    let above = slice.iter().filter(|&&v| v > mid).count() as f64 / n;
    [mean / 255.0, var / (255.0 * 255.0), above]
}

pub fn features_for_manifest(manifest: &DatasetManifest) -> Result<Vec<FeatureVector>> {
    let mut out = Vec::with_capacity(3 * manifest.studies.len());
    for s in &manifest.studies {
        let img = read_slices_i16(&s.slices, s.dims, s.spacing, s.modality)?;
        for (level, z) in DiscLevel::ALL.into_iter().zip(s.disc_indices.as_array()) {
            out.push(FeatureVector { study_id: s.study_id.clone(), level, values: slice_features(img.slice(z)).to_vec() });
        }
    }
    Ok(out)
}

/// Process entry point for `features --manifest --out`.
pub fn run_features(manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    write_features_csv(out, &features_for_manifest(&manifest)?)?;
    Ok(())
}

/// Pixelwise majority label; ties go to the smallest label.
pub fn majority_vote(masks: &[&[u8]]) -> Vec<u8> {
    let Some(first) = masks.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|i| {
            let mut counts = [0usize; 3];
            for m in masks {
                counts[m[i] as usize] += 1;
            }
            let best = *counts.iter().max().unwrap();
            counts.iter().position(|&c| c == best).unwrap() as u8
        })
        .collect()
}

/// One majority-vote mask per distinct normalized slice position; prediction
/// returns the mask of the nearest stored position (ties to the lower one).
#[derive(Debug, Clone, PartialEq)]
pub struct MemorizingModel {
    pub nx: usize,
    pub ny: usize,
    /// Sorted by position.
    pub entries: Vec<(f64, Vec<u8>)>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    nx: usize,
    ny: usize,
    entries: Vec<EntryFile>,
}

#[derive(Serialize, Deserialize)]
struct EntryFile {
    position: f64,
    mask: String,
}

fn position_key(p: f64) -> i64 {
    (p * 1e9).round() as i64
}

impl MemorizingModel {
    pub fn train<'a>(nx: usize, ny: usize, examples: impl IntoIterator<Item = (f64, &'a [u8])>) -> Result<Self> {
        let mut groups: BTreeMap<i64, (f64, Vec<&[u8]>)> = BTreeMap::new();
        for (pos, labels) in examples {
            if labels.len() != nx * ny {
                return Err(PhantomError::Format(format!("training mask has {} pixels, expected {nx}x{ny}", labels.len())));
            }
            if !pos.is_finite() {
                return Err(PhantomError::Format(format!("training position {pos} is not finite")));
            }
            groups.entry(position_key(pos)).or_insert_with(|| (pos, Vec::new())).1.push(labels);
        }
        if groups.is_empty() {
            return Err(PhantomError::Format("no training pairs".into()));
        }
        let entries = groups.into_values().map(|(p, ms)| (p, majority_vote(&ms))).collect();
        Ok(Self { nx, ny, entries })
    }

    pub fn predict_slice(&self, position: f64) -> &[u8] {
        let mut best = &self.entries[0];
        for e in &self.entries[1..] {
            if (e.0 - position).abs() < (best.0 - position).abs() {
                best = e;
            }
        }
        &best.1
    }

    /// Labels on every slice of `range`, zeros elsewhere.
    pub fn predict_volume(&self, dims: Dims, spacing: VoxelSpacing, range: RangeInclusive<usize>) -> Result<LabelVolume> {
        if (dims.nx, dims.ny) != (self.nx, self.ny) {
            return Err(PhantomError::Format(format!(
                "model is {}x{}, study is {}x{}",
                self.nx, self.ny, dims.nx, dims.ny
            )));
        }
        let mut vol = LabelVolume::zeros(dims, spacing);
        let depth = range.clone().count();
        for z in range.clone() {
            vol.set_slice(z, self.predict_slice(normalized_position(z - range.start(), depth)))?;
        }
        Ok(vol)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            nx: self.nx,
            ny: self.ny,
            entries: self
                .entries
                .iter()
                .map(|(p, m)| EntryFile { position: *p, mask: m.iter().map(|&v| (b'0' + v) as char).collect() })
                .collect(),
        };
        serde_json::to_string(&file).expect("model serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| PhantomError::Format(e.to_string()))?;
        let mut entries = Vec::with_capacity(file.entries.len());
        for e in file.entries {
            let mask: Vec<u8> = e.mask.bytes().map(|b| b.wrapping_sub(b'0')).collect();
            if mask.len() != file.nx * file.ny || mask.iter().any(|&v| v > 2) {
                return Err(PhantomError::Format(format!("bad mask at position {}", e.position)));
            }
            entries.push((e.position, mask));
        }
        if entries.is_empty() {
            return Err(PhantomError::Format("model has no entries".into()));
        }
        Ok(Self { nx: file.nx, ny: file.ny, entries })
    }
}

/// Process entry point for `train --pairs --model-out`.
pub fn run_train(pairs_path: &Path, model_out: &Path) -> Result<()> {
    let pairs = read_pairs_csv(pairs_path)?;
    let first = pairs.first().ok_or_else(|| PhantomError::Format("no training pairs".into()))?;
    let (nx, ny) = (first.nx, first.ny);
    let masks = pairs
        .iter()
        .map(|p| Ok((p.position, read_mask_slice(&p.mask, p.nx, p.ny)?)))
        .collect::<Result<Vec<_>>>()?;
    let model = MemorizingModel::train(nx, ny, masks.iter().map(|(p, m)| (*p, m.as_slice())))?;
    if let Some(parent) = model_out.parent() {
        fs::create_dir_all(parent).map_err(|e| PhantomError::io(parent, e))?;
    }
    fs::write(model_out, model.to_json()).map_err(|e| PhantomError::io(model_out, e))
}

/// Process entry point for `predict --model --manifest --out`.
pub fn run_predict(model_path: &Path, manifest_path: &Path, out_dir: &Path) -> Result<()> {
    let text = fs::read_to_string(model_path).map_err(|e| PhantomError::io(model_path, e))?;
    let model = MemorizingModel::from_json(&text)?;
    let manifest = load_manifest(manifest_path)?;
    fs::create_dir_all(out_dir).map_err(|e| PhantomError::io(out_dir, e))?;
    for s in &manifest.studies {
        let vol = model.predict_volume(s.dims, s.spacing, s.disc_indices.range())?;
        write_label_volume(&vol, &prediction_path(out_dir, &s.study_id))?;
    }
    Ok(())
}

/// In-process cascade backend over [`MemorizingModel`].
#[derive(Debug, Clone)]
pub struct MemorizingBackend {
    studies: BTreeMap<String, Vec<(String, LabelVolume, RangeInclusive<usize>)>>,
}

impl MemorizingBackend {
    pub fn new(datasets: &[CascadeDataset]) -> Self {
        let studies = datasets
            .iter()
            .map(|d| {
                let list = d
                    .studies
                    .iter()
                    .filter_map(|s| d.template.get(&s.study_id).map(|t| (s.study_id.clone(), t.clone(), s.range.clone())))
                    .collect();
                (d.dataset_id.clone(), list)
            })
            .collect();
        Self { studies }
    }
}

impl CascadeBackend for MemorizingBackend {
    type Model = MemorizingModel;

    fn train(&self, _step: usize, examples: &[TrainingExample]) -> std::result::Result<MemorizingModel, String> {
        let first = examples.first().ok_or("no training examples")?;
        MemorizingModel::train(first.nx, first.ny, examples.iter().map(|e| (e.position, e.labels.as_slice())))
            .map_err(|e| e.to_string())
    }

    fn predict(
        &self,
        _step: usize,
        model: &MemorizingModel,
        dataset_id: &str,
    ) -> std::result::Result<BTreeMap<String, LabelVolume>, String> {
        let list = self.studies.get(dataset_id).ok_or_else(|| format!("unknown dataset {dataset_id}"))?;
        list.iter()
            .map(|(id, t, range)| {
                let v = model.predict_volume(t.dims(), t.spacing(), range.clone()).map_err(|e| e.to_string())?;
                Ok((id.clone(), v))
            })
            .collect()
    }
}
