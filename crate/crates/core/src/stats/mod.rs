//! Agreement and equivalence statistics for AI-vs-manual measurements.

mod agreement;
mod lmm;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agreement::{
    bland_altman_classic, bland_altman_lmm, icc_two_way_single, icc_variance_components, icc_variance_components_ci,
    min_equivalence_margin, paired_difference_estimate, tost_equivalence, BlandAltman, DfMode, EquivalenceResult,
    AgreementResult, IccEstimate, BOOTSTRAP_RESAMPLES,
};
pub use lmm::{
    fit_lmm, fit_random_intercept_lmm, reml_profile, repeated_design, Criterion, LmmDesign, LmmFit, VarianceComponents,
    METHOD_EFFECT,
};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty input")]
    EmptyInput,
    #[error("need at least {needed} units, got {got}")]
    TooFewUnits { needed: usize, got: usize },
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("optimizer did not converge: {0}")]
    NotConverged(String),
    #[error("equivalence margin must be positive and finite, got {0}")]
    InvalidMargin(f64),
    #[error("standard error must be positive and finite, got {0}")]
    InvalidStandardError(f64),
    #[error("manual mean is zero")]
    ZeroManualMean,
    #[error("both variance components are zero")]
    BothZero,
    #[error("all observations are identical")]
    DegenerateVariance,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("duplicate observation {0}")]
    Duplicate(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Baseline,
    Bedrest,
    Recovery,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Bedrest => "bedrest",
            Phase::Recovery => "recovery",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "baseline" => Some(Phase::Baseline),
            "bedrest" => Some(Phase::Bedrest),
            "recovery" => Some(Phase::Recovery),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Ai,
    Manual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub unit_id: String,
    pub manual: f64,
    pub ai: f64,
}

impl PairedSample {
    pub fn new(unit_id: impl Into<String>, manual: f64, ai: f64) -> Self {
        Self { unit_id: unit_id.into(), manual, ai }
    }

    pub fn difference(&self) -> f64 {
        self.ai - self.manual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedSample {
    pub subject_id: String,
    pub phase: Phase,
    pub method: Method,
    pub value: f64,
}

pub(crate) fn check_finite_pairs(pairs: &[PairedSample]) -> Result<()> {
    if pairs.iter().all(|p| p.manual.is_finite() && p.ai.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

/// Per-subject AI-minus-manual differences, one per phase with both methods.
pub fn repeated_differences(samples: &[RepeatedSample]) -> Result<Vec<(String, Phase, f64)>> {
    let mut cells: BTreeMap<(&str, Phase), [Option<f64>; 2]> = BTreeMap::new();
    for s in samples {
        if !s.value.is_finite() {
            return Err(StatsError::NonFinite);
        }
        let slot = &mut cells.entry((&s.subject_id, s.phase)).or_default()[s.method as usize];
        if slot.replace(s.value).is_some() {
            return Err(StatsError::Duplicate(format!("{} {} {:?}", s.subject_id, s.phase.as_str(), s.method)));
        }
    }
    Ok(cells
        .into_iter()
        .filter_map(|((subject, phase), [ai, manual])| Some((subject.to_string(), phase, ai? - manual?)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and population SD. With `groups`, values are first averaged per
/// group and the summary is taken over group means.
pub fn dsc_summary(values: &[f64], groups: Option<&[String]>) -> Result<MeanSd> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let values: Vec<f64> = match groups {
        None => values.to_vec(),
        Some(groups) => {
            if groups.len() != values.len() {
                return Err(StatsError::TooFewUnits { needed: values.len(), got: groups.len() });
            }
            let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for (g, &v) in groups.iter().zip(values) {
                by.entry(g).or_default().push(v);
            }
            by.values().map(|v| mean(v)).collect()
        }
    };
    let m = mean(&values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    Ok(MeanSd { mean: m, sd: var.sqrt(), n: values.len() })
}

/// Mean and sample (n-1) SD of a measurement column.
pub fn mean_sd_sample(values: &[f64]) -> Result<MeanSd> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let m = mean(values);
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(MeanSd { mean: m, sd, n: values.len() })
}

pub fn mae_summary(pairs: &[PairedSample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    check_finite_pairs(pairs)?;
    Ok(pairs.iter().map(|p| p.difference().abs()).sum::<f64>() / pairs.len() as f64)
}
