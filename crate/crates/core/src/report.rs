//! Agreement tables, Bland–Altman listings and SVG plots.
//!
//! CSV values carry six decimals; the human-readable table rounds for
//! display. A statistic that cannot be computed for a cell is left blank and
//! the reason goes to the `note` column.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::mask::Side;
use crate::quant::{Metric, QuantTable};
use crate::stats::{
    bland_altman_classic, bland_altman_lmm, dsc_summary, fit_random_intercept_lmm, icc_two_way_single,
    icc_variance_components_ci, mae_summary, mean_sd_sample, min_equivalence_margin, paired_difference_estimate,
    repeated_design, BlandAltman, Criterion, DfMode, IccEstimate, MeanSd, Method, PairedSample, Phase,
    RepeatedSample, BOOTSTRAP_RESAMPLES, METHOD_EFFECT,
};

pub const STATS_HEADER: &str = "dataset_id,metric,side,n,analysis,manual_mean,manual_sd,ai_mean,ai_sd,bias,se,\
tost_min_delta,tost_min_delta_pct,mae,icc,icc_ci_low,icc_ci_high,icc_method,loa_low,loa_high,note";
pub const BA_HEADER: &str = "unit_id,mean_value,difference";
pub const BA_FOOTER_HEADER: &str = "bias,loa_low,loa_high";
pub const DSC_HEADER: &str = "dataset_id,stage,side,n,mean,sd";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    /// Repeated-measures models when every study has a subject and a known
    /// phase, image-level paired analysis otherwise.
    #[default]
    Auto,
    Paired,
    Repeated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsOptions {
    pub mode: AnalysisMode,
    pub criterion: Criterion,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self { mode: AnalysisMode::Auto, criterion: Criterion::Reml, resamples: BOOTSTRAP_RESAMPLES, seed: 0 }
    }
}

/// Subject and phase of each study, for repeated-measures designs.
pub type StudyDesign = BTreeMap<String, (String, Phase)>;

/// One (dataset, metric, side) cell of the agreement table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub dataset_id: String,
    pub metric: Metric,
    pub side: Side,
    pub n: usize,
    pub analysis: String,
    pub manual: Option<MeanSd>,
    pub ai: Option<MeanSd>,
    pub bias: Option<f64>,
    pub se: Option<f64>,
    pub min_delta: Option<(f64, f64)>,
    pub mae: Option<f64>,
    pub icc: Option<IccEstimate>,
    pub icc_method: String,
    pub ba: Option<BlandAltman>,
    pub notes: Vec<String>,
    /// (unit id, manual, AI) pairs the row was computed from.
    #[serde(skip)]
    pub pairs: Vec<(String, f64, f64)>,
}

fn keep<T, E: std::fmt::Display>(what: &str, r: Result<T, E>, notes: &mut Vec<String>) -> Option<T> {
    r.map_err(|e| notes.push(format!("{what}: {e}"))).ok()
}

fn paired_row(row: &mut StatsRow, samples: &[PairedSample]) {
    let notes = &mut row.notes;
    row.analysis = "paired-t".into();
    row.icc_method = "icc2_1-F".into();
    if let Some((b, se, mode)) = keep("bias", paired_difference_estimate(samples), notes) {
        row.bias = Some(b);
        row.se = Some(se);
        if let Some(m) = &row.manual {
            row.min_delta = keep("min_delta", min_equivalence_margin(b, se, m.mean, mode), notes);
        }
    }
    row.icc = keep("icc", icc_two_way_single(samples), notes);
    row.ba = keep("bland_altman", bland_altman_classic(samples), notes);
}

fn repeated_row(row: &mut StatsRow, samples: &[RepeatedSample], opts: &StatsOptions) {
    let notes = &mut row.notes;
    row.analysis = format!("lmm-{}", DfMode::Normal.label());
    row.icc_method = "vc-bootstrap".into();
    let fit = keep("lmm", fit_random_intercept_lmm(samples, opts.criterion), notes);
    if let Some(fit) = &fit {
        notes.extend(fit.notes.iter().cloned());
        if let Some((b, se)) = fit.coefficient(METHOD_EFFECT) {
            row.bias = Some(b);
            row.se = Some(se);
            if let Some(m) = &row.manual {
                row.min_delta = keep("min_delta", min_equivalence_margin(b, se, m.mean, DfMode::Normal), notes);
            }
        }
        if let Some(design) = keep("lmm", repeated_design(samples), notes) {
            row.icc = keep("icc", icc_variance_components_ci(&design, fit, opts.resamples, opts.seed), notes);
        }
    }
    row.ba = keep("bland_altman", bland_altman_lmm(samples, opts.criterion), notes);
}

/// Agreement rows for every (metric, side) with at least one AI/manual pair.
pub fn compute_stats(table: &QuantTable, design: &StudyDesign, opts: &StatsOptions) -> Vec<StatsRow> {
    let mut rows = Vec::new();
    for metric in Metric::ALL {
        for side in [Side::Left, Side::Right] {
            let pairs = table.paired(side, metric);
            if pairs.is_empty() {
                continue;
            }
            let manual: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let ai: Vec<f64> = pairs.iter().map(|p| p.2).collect();
            let mut row = StatsRow {
                dataset_id: table.dataset_id.clone(),
                metric,
                side,
                n: pairs.len(),
                analysis: String::new(),
                manual: mean_sd_sample(&manual).ok(),
                ai: mean_sd_sample(&ai).ok(),
                bias: None,
                se: None,
                min_delta: None,
                mae: None,
                icc: None,
                icc_method: String::new(),
                ba: None,
                notes: Vec::new(),
                pairs: pairs.clone(),
            };
            let samples: Vec<PairedSample> = pairs.iter().map(|(id, m, a)| PairedSample::new(id, *m, *a)).collect();
            row.mae = keep("mae", mae_summary(&samples), &mut row.notes);
            let repeated = match opts.mode {
                AnalysisMode::Paired => None,
                AnalysisMode::Auto | AnalysisMode::Repeated => {
                    let covered = pairs.iter().all(|p| design.contains_key(&p.0));
                    if !covered && opts.mode == AnalysisMode::Repeated {
                        row.notes.push("repeated: studies lack subject or phase, fell back to paired".into());
                    }
                    covered.then(|| {
                        pairs
                            .iter()
                            .flat_map(|(id, m, a)| {
                                let (subject, phase) = &design[id];
                                [(Method::Manual, *m), (Method::Ai, *a)].map(|(method, value)| RepeatedSample {
                                    subject_id: subject.clone(),
                                    phase: *phase,
                                    method,
                                    value,
                                })
                            })
                            .collect::<Vec<_>>()
                    })
                }
            };
            match repeated {
                Some(samples) => repeated_row(&mut row, &samples, opts),
                None => paired_row(&mut row, &samples),
            }
            rows.push(row);
        }
    }
    rows
}

fn f6(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => {
            let v = if v == 0.0 { 0.0 } else { v };
            format!("{v:.6}")
        }
        _ => String::new(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut out = format!("{STATS_HEADER}\n");
    for r in rows {
        let fields = [
            r.dataset_id.clone(),
            r.metric.as_str().into(),
            r.side.as_str().into(),
            r.n.to_string(),
            r.analysis.clone(),
            f6(r.manual.map(|m| m.mean)),
            f6(r.manual.map(|m| m.sd)),
            f6(r.ai.map(|m| m.mean)),
            f6(r.ai.map(|m| m.sd)),
            f6(r.bias),
            f6(r.se),
            f6(r.min_delta.map(|d| d.0)),
            f6(r.min_delta.map(|d| d.1)),
            f6(r.mae),
            f6(r.icc.map(|i| i.icc)),
            f6(r.icc.map(|i| i.ci_low)),
            f6(r.icc.map(|i| i.ci_high)),
            r.icc_method.clone(),
            f6(r.ba.map(|b| b.loa_low)),
            f6(r.ba.map(|b| b.loa_high)),
            csv_field(&r.notes.join("; ")),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn display_decimals(metric: Metric) -> usize {
    match metric {
        Metric::FatRatio => 4,
        _ => 2,
    }
}

/// Layout of the published agreement tables: one column per (metric, side),
/// rows Manual, AI, TOST Min. δ, MAE and ICC [95% CI].
pub fn format_table(rows: &[StatsRow]) -> String {
    let mut out = String::new();
    let mut by_dataset: BTreeMap<&str, Vec<&StatsRow>> = BTreeMap::new();
    for r in rows {
        by_dataset.entry(&r.dataset_id).or_default().push(r);
    }
    for (dataset, rows) in by_dataset {
        let head: Vec<String> =
            rows.iter().map(|r| format!("{} {} ({})", dataset, r.metric.as_str(), &r.side.as_str()[..1].to_uppercase())).collect();
        let blank = |s: Option<String>| s.unwrap_or_else(|| "-".into());
        let line = |label: &str, f: &dyn Fn(&StatsRow) -> Option<String>| {
            let mut l = label.to_string();
            for r in &rows {
                l.push('\t');
                l.push_str(&blank(f(r)));
            }
            l
        };
        let ms = |m: Option<MeanSd>, d: usize| m.map(|m| format!("{:.d$} ± {:.d$}", m.mean, m.sd));
        writeln!(out, "Muscles\t{}", head.join("\t")).unwrap();
        writeln!(out, "{}", line("Manual", &|r| ms(r.manual, display_decimals(r.metric)))).unwrap();
        writeln!(out, "{}", line("AI", &|r| ms(r.ai, display_decimals(r.metric)))).unwrap();
        writeln!(out, "{}", line("TOST Min. δ", &|r| r.min_delta.map(|d| format!("{:.2}%", d.1)))).unwrap();
        writeln!(
            out,
            "{}",
            line("MAE", &|r| {
                let d = display_decimals(r.metric);
                r.mae.map(|m| format!("{m:.d$}"))
            })
        )
        .unwrap();
        writeln!(
            out,
            "{}",
            line("ICC [95% CI]", &|r| r
                .icc
                .filter(|i| i.ci_low.is_finite() && i.ci_high.is_finite())
                .map(|i| format!("{:.2} [{:.2}–{:.2}]", i.icc, i.ci_low, i.ci_high)))
        )
        .unwrap();
        writeln!(out).unwrap();
    }
    out
}

/// Points as (unit id, mean of the two methods, AI minus manual).
pub fn bland_altman_points(pairs: &[(String, f64, f64)]) -> Vec<(String, f64, f64)> {
    pairs.iter().map(|(id, m, a)| (id.clone(), (m + a) / 2.0, a - m)).collect()
}

pub fn bland_altman_csv(pairs: &[(String, f64, f64)], ba: &BlandAltman) -> String {
    let mut out = format!("{BA_HEADER}\n");
    for (id, mean, diff) in bland_altman_points(pairs) {
        writeln!(out, "{},{},{}", csv_field(&id), f6(Some(mean)), f6(Some(diff))).unwrap();
    }
    writeln!(out, "\n{BA_FOOTER_HEADER}").unwrap();
    writeln!(out, "{},{},{}", f6(Some(ba.bias)), f6(Some(ba.loa_low)), f6(Some(ba.loa_high))).unwrap();
    out
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: [f64; 4] = [70.0, 20.0, 40.0, 50.0]; // left, right, top, bottom

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let pad = if span > 0.0 { 0.1 * span } else { lo.abs().max(1.0) * 0.1 };
    (lo - pad, hi + pad)
}

/// Mean-versus-difference scatter with bias and limits of agreement drawn as
/// horizontal lines. Axis ticks carry their values so the transform can be
/// recovered from the file.
pub fn bland_altman_svg(title: &str, pairs: &[(String, f64, f64)], ba: &BlandAltman) -> String {
    let pts = bland_altman_points(pairs);
    let (x0, x1) = padded_range(pts.iter().map(|p| p.1));
    let (y0, y1) = padded_range(pts.iter().map(|p| p.2).chain([ba.bias, ba.loa_low, ba.loa_high]));
    let [ml, mr, mt, mb] = MARGIN;
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (W - ml - mr);
    let py = |y: f64| H - mb - (y - y0) / (y1 - y0) * (H - mt - mb);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, esc(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - ml - mr,
        H - mt - mb
    )
    .unwrap();
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = py(v);
        writeln!(s, r#"<line class="ytick" x1="{}" y1="{y:.3}" x2="{ml}" y2="{y:.3}" stroke="black"/>"#, ml - 5.0)
            .unwrap();
        writeln!(s, r#"<text class="ytick-label" x="{}" y="{y:.3}" font-size="10" text-anchor="end">{}</text>"#, ml - 8.0, f6(Some(v)))
            .unwrap();
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let x = px(xv);
        writeln!(
            s,
            r#"<text class="xtick-label" x="{x:.3}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
            H - mb + 15.0,
            f6(Some(xv))
        )
        .unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">Mean of AI and manual</text>"#, W / 2.0, H - 10.0)
        .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">AI − manual</text>"#,
        H / 2.0,
        H / 2.0
    )
    .unwrap();
    for (name, v, dash) in [("bias", ba.bias, ""), ("loa_low", ba.loa_low, "6 4"), ("loa_high", ba.loa_high, "6 4")] {
        let y = py(v);
        let dash = if dash.is_empty() { String::new() } else { format!(r#" stroke-dasharray="{dash}""#) };
        writeln!(s, r#"<line class="{name}" x1="{ml}" y1="{y:.3}" x2="{}" y2="{y:.3}" stroke="firebrick"{dash}/>"#, W - mr)
            .unwrap();
        writeln!(
            s,
            r#"<text class="{name}-label" x="{}" y="{:.3}" font-size="10" text-anchor="end">{name} {}</text>"#,
            W - mr - 4.0,
            y - 4.0,
            f6(Some(v))
        )
        .unwrap();
    }
    for (id, x, y) in &pts {
        writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="3" fill="steelblue"><title>{}</title></circle>"#, px(*x), py(*y), esc(id))
            .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// DSC of one set of masks (`stage`) against the manual reference, per side.
#[derive(Debug, Clone, PartialEq)]
pub struct DscRow {
    pub dataset_id: String,
    pub stage: String,
    pub side: Side,
    pub summary: MeanSd,
}

/// Per-slice DSC values for one side, optionally grouped (by subject), into
/// mean ± population SD.
pub fn dsc_row(dataset_id: &str, stage: &str, side: Side, values: &[f64], groups: Option<&[String]>) -> Option<DscRow> {
    dsc_summary(values, groups)
        .ok()
        .map(|summary| DscRow { dataset_id: dataset_id.into(), stage: stage.into(), side, summary })
}

pub fn dsc_csv(rows: &[DscRow]) -> String {
    let mut out = format!("{DSC_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.dataset_id,
            r.stage,
            r.side.as_str(),
            r.summary.n,
            f6(Some(r.summary.mean)),
            f6(Some(r.summary.sd))
        )
        .unwrap();
    }
    out
}
