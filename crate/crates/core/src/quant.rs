//! Muscle volume, Dixon fat ratio and CT attenuation from label volumes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::Side;
use crate::volume::{LabelVolume, ScalarVolume};

pub const QUANT_HEADER: &str = "dataset_id,study_id,side,source,volume_ml,fat_ratio,mean_hu";

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("{0} mask is empty")]
    EmptyMask(Side),
    #[error("every {0} voxel has fat + water = 0")]
    AllVoxelsDegenerate(Side),
    #[error("mask and image dimensions differ")]
    DimensionMismatch,
    #[error("study {0} lacks a matching AI or manual mask")]
    UnpairedStudy(String),
    #[error("quant table: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Ai,
    Manual,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Ai => "AI",
            Source::Manual => "MANUAL",
        }
    }

    pub fn parse(s: &str) -> Option<Source> {
        match s {
            "AI" => Some(Source::Ai),
            "MANUAL" => Some(Source::Manual),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRecord {
    pub study_id: String,
    pub side: Side,
    pub source: Source,
    pub volume_ml: f64,
    pub fat_ratio: Option<f64>,
    pub mean_hu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantTable {
    pub dataset_id: String,
    pub records: Vec<QuantRecord>,
}

fn check_dims(mask: &LabelVolume, image: &ScalarVolume) -> Result<(), QuantError> {
    if mask.dims() == image.dims() {
        Ok(())
    } else {
        Err(QuantError::DimensionMismatch)
    }
}

/// Voxel count times voxel volume, in mL.
pub fn muscle_volume(mask: &LabelVolume, side: Side) -> f64 {
    mask.count(side.label()) as f64 * mask.spacing().voxel_volume_mm3() / 1000.0
}

/// Mean over masked voxels of fat / (fat + water); voxels with a zero sum are
/// skipped.
pub fn dixon_fat_ratio(
    mask: &LabelVolume,
    fat: &ScalarVolume,
    water: &ScalarVolume,
    side: Side,
) -> Result<f64, QuantError> {
    check_dims(mask, fat)?;
    check_dims(mask, water)?;
    let label = side.label();
    let mut n_mask = 0usize;
    let mut n = 0usize;
    let mut sum = 0.0;
    for ((&m, &f), &w) in mask.data().iter().zip(fat.data()).zip(water.data()) {
        if m != label {
            continue;
        }
        n_mask += 1;
        let total = f + w;
        if total != 0.0 {
            sum += f / total;
            n += 1;
        }
    }
    match (n_mask, n) {
        (0, _) => Err(QuantError::EmptyMask(side)),
        (_, 0) => Err(QuantError::AllVoxelsDegenerate(side)),
        _ => Ok(sum / n as f64),
    }
}

pub fn mean_attenuation(mask: &LabelVolume, ct: &ScalarVolume, side: Side) -> Result<f64, QuantError> {
    check_dims(mask, ct)?;
    let label = side.label();
    let (sum, n) = mask
        .data()
        .iter()
        .zip(ct.data())
        .filter(|(&m, _)| m == label)
        .fold((0.0, 0usize), |(s, n), (_, &v)| (s + v, n + 1));
    if n == 0 {
        return Err(QuantError::EmptyMask(side));
    }
    Ok(sum / n as f64)
}

/// Image data for one study, in the geometry the masks are drawn on.
pub struct QuantInput<'a> {
    pub study_id: &'a str,
    pub image: &'a ScalarVolume,
    /// Dixon fat image when `image` is the paired water image.
    pub fat: Option<&'a ScalarVolume>,
    /// Slices outside this range are ignored.
    pub range: RangeInclusive<usize>,
}

fn restrict(mask: &LabelVolume, range: &RangeInclusive<usize>) -> LabelVolume {
    let dims = mask.dims();
    let n = dims.slice_len();
    let data = mask
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if range.contains(&(i / n)) { v } else { 0 })
        .collect();
    LabelVolume::new(dims, mask.spacing(), data).expect("labels already valid")
}

// An empty side has a volume (zero) but no intensity statistic.
fn empty_as_none(
    value: Option<Result<f64, QuantError>>,
    study: &str,
    source: Source,
) -> Result<Option<f64>, QuantError> {
    match value {
        Some(Err(QuantError::EmptyMask(side))) => {
            log::warn!("{study} {} {side} mask is empty; intensity metric left blank", source.as_str());
            Ok(None)
        }
        other => other.transpose(),
    }
}

fn records_for(
    input: &QuantInput<'_>,
    mask: &LabelVolume,
    source: Source,
) -> Result<Vec<QuantRecord>, QuantError> {
    check_dims(mask, input.image)?;
    let mask = restrict(mask, &input.range);
    let is_ct = input.image.modality() == crate::volume::Modality::Ct;
    Side::BOTH
        .into_iter()
        .map(|side| {
            let fat_ratio = input.fat.map(|fat| dixon_fat_ratio(&mask, fat, input.image, side));
            let mean_hu = is_ct.then(|| mean_attenuation(&mask, input.image, side));
            Ok(QuantRecord {
                study_id: input.study_id.to_string(),
                side,
                source,
                volume_ml: muscle_volume(&mask, side),
                fat_ratio: empty_as_none(fat_ratio, input.study_id, source)?,
                mean_hu: empty_as_none(mean_hu, input.study_id, source)?,
            })
        })
        .collect()
}

/// One AI and one MANUAL record per study and side. Fat ratio is filled for
/// Dixon studies and mean HU for CT studies.
pub fn quantify_dataset(
    dataset_id: &str,
    inputs: &[QuantInput<'_>],
    ai: &BTreeMap<String, LabelVolume>,
    manual: &BTreeMap<String, LabelVolume>,
) -> Result<QuantTable, QuantError> {
    let ids: Vec<&str> = inputs.iter().map(|i| i.study_id).collect();
    for id in ai.keys().chain(manual.keys()) {
        if !ids.contains(&id.as_str()) {
            return Err(QuantError::UnpairedStudy(id.clone()));
        }
    }
    let mut records = Vec::new();
    for input in inputs {
        let (Some(a), Some(m)) = (ai.get(input.study_id), manual.get(input.study_id)) else {
            return Err(QuantError::UnpairedStudy(input.study_id.to_string()));
        };
        let mut pair = [records_for(input, a, Source::Ai)?, records_for(input, m, Source::Manual)?].concat();
        pair.sort_by_key(|r| (r.side, r.source));
        records.extend(pair);
    }
    Ok(QuantTable { dataset_id: dataset_id.to_string(), records })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl QuantTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{QUANT_HEADER}\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.dataset_id,
                r.study_id,
                r.side.as_str(),
                r.source.as_str(),
                r.volume_ml,
                opt(r.fat_ratio),
                opt(r.mean_hu)
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), QuantError> {
        fs::write(path, self.to_csv())
            .map_err(|e| QuantError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    /// Parse a table written by [`QuantTable::to_csv`]. All rows must share
    /// one dataset id.
    pub fn from_csv(text: &str) -> Result<Self, QuantError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(QUANT_HEADER) {
            return Err(QuantError::Parse(format!("header must be {QUANT_HEADER}")));
        }
        let mut table = QuantTable::default();
        for (row, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| QuantError::Parse(format!("row {row}: {what}"));
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            if row == 0 {
                table.dataset_id = f[0].to_string();
            } else if table.dataset_id != f[0] {
                return Err(bad("mixed dataset ids"));
            }
            let num = |s: &str| -> Result<Option<f64>, QuantError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad("bad number"))
                }
            };
            table.records.push(QuantRecord {
                study_id: f[1].to_string(),
                side: Side::parse(f[2]).ok_or_else(|| bad("bad side"))?,
                source: Source::parse(f[3]).ok_or_else(|| bad("bad source"))?,
                volume_ml: num(f[4])?.ok_or_else(|| bad("missing volume"))?,
                fat_ratio: num(f[5])?,
                mean_hu: num(f[6])?,
            });
        }
        Ok(table)
    }

    /// (manual, AI) values per study for one side and metric.
    pub fn paired(&self, side: Side, metric: Metric) -> Vec<(String, f64, f64)> {
        let mut cells: BTreeMap<&str, [Option<f64>; 2]> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.side == side) {
            if let Some(v) = metric.value(r) {
                cells.entry(&r.study_id).or_default()[r.source as usize] = Some(v);
            }
        }
        cells
            .into_iter()
            .filter_map(|(id, [ai, manual])| Some((id.to_string(), manual?, ai?)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    VolumeMl,
    FatRatio,
    MeanHu,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::VolumeMl, Metric::FatRatio, Metric::MeanHu];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::VolumeMl => "volume_ml",
            Metric::FatRatio => "fat_ratio",
            Metric::MeanHu => "mean_hu",
        }
    }

    pub fn value(self, r: &QuantRecord) -> Option<f64> {
        match self {
            Metric::VolumeMl => Some(r.volume_ml),
            Metric::FatRatio => r.fat_ratio,
            Metric::MeanHu => r.mean_hu,
        }
    }
}
