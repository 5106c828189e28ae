use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal as StdNormal, StudentsT};

use super::lmm::{fit_lmm, Criterion, LmmDesign, LmmFit, VarianceComponents};
use super::{check_finite_pairs, repeated_differences, PairedSample, RepeatedSample, Result, StatsError};
use crate::volume::percentile_linear;

pub const BOOTSTRAP_RESAMPLES: usize = 2000;

/// Reference distribution for equivalence tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DfMode {
    Normal,
    StudentT { df: f64 },
}

impl DfMode {
    pub fn quantile(self, p: f64) -> f64 {
        match self {
            DfMode::Normal => StdNormal::standard().inverse_cdf(p),
            DfMode::StudentT { df } => StudentsT::new(0.0, 1.0, df).expect("df > 0").inverse_cdf(p),
        }
    }

    pub fn cdf(self, x: f64) -> f64 {
        match self {
            DfMode::Normal => StdNormal::standard().cdf(x),
            DfMode::StudentT { df } => StudentsT::new(0.0, 1.0, df).expect("df > 0").cdf(x),
        }
    }

    pub fn label(self) -> String {
        match self {
            DfMode::Normal => "normal".to_string(),
            DfMode::StudentT { df } => format!("t(df={df})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceResult {
    pub beta_hat: f64,
    pub se: f64,
    pub delta: f64,
    pub p_lower: f64,
    pub p_upper: f64,
    pub p_tost: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub equivalent: bool,
    pub min_delta_abs: f64,
    pub mode: DfMode,
}

fn check_se(se: f64) -> Result<()> {
    if se.is_finite() && se > 0.0 {
        Ok(())
    } else {
        Err(StatsError::InvalidStandardError(se))
    }
}

/// Two one-sided tests at the 5% level. The verdict is the 90% CI lying
/// strictly inside (-δ, δ); p-values use the same distribution.
pub fn tost_equivalence(beta_hat: f64, se: f64, delta: f64, mode: DfMode) -> Result<EquivalenceResult> {
    check_se(se)?;
    if !(delta > 0.0) || delta.is_nan() {
        return Err(StatsError::InvalidMargin(delta));
    }
    let q = mode.quantile(0.95);
    let p_lower = 1.0 - mode.cdf((beta_hat + delta) / se);
    let p_upper = mode.cdf((beta_hat - delta) / se);
    let ci_low = beta_hat - q * se;
    let ci_high = beta_hat + q * se;
    Ok(EquivalenceResult {
        beta_hat,
        se,
        delta,
        p_lower,
        p_upper,
        p_tost: p_lower.max(p_upper),
        ci_low,
        ci_high,
        equivalent: -delta < ci_low && ci_high < delta,
        min_delta_abs: beta_hat.abs() + q * se,
        mode,
    })
}

/// Narrowest margin at which TOST still declares equivalence, absolute and
/// as a percentage of the manual mean.
pub fn min_equivalence_margin(beta_hat: f64, se: f64, manual_mean: f64, mode: DfMode) -> Result<(f64, f64)> {
    check_se(se)?;
    if manual_mean == 0.0 {
        return Err(StatsError::ZeroManualMean);
    }
    let abs = beta_hat.abs() + mode.quantile(0.95) * se;
    Ok((abs, 100.0 * abs / manual_mean.abs()))
}

/// Mean AI-minus-manual difference, its standard error and t(n-1) mode for
/// image-level paired data.
pub fn paired_difference_estimate(pairs: &[PairedSample]) -> Result<(f64, f64, DfMode)> {
    if pairs.len() < 2 {
        return Err(StatsError::TooFewUnits { needed: 2, got: pairs.len() });
    }
    check_finite_pairs(pairs)?;
    let n = pairs.len() as f64;
    let d: Vec<f64> = pairs.iter().map(PairedSample::difference).collect();
    let m = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok((m, sd / n.sqrt(), DfMode::StudentT { df: n - 1.0 }))
}

pub fn icc_variance_components(vc: VarianceComponents) -> Result<f64> {
    let total = vc.sigma2_between + vc.sigma2_within;
    if total <= 0.0 {
        return Err(StatsError::BothZero);
    }
    Ok(vc.sigma2_between / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IccEstimate {
    pub icc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Variance-components ICC with a seeded parametric-bootstrap 95% interval.
/// Resample `b` draws from its own ChaCha stream, so the interval does not
/// depend on how resamples are scheduled across threads.
pub fn icc_variance_components_ci(
    design: &LmmDesign,
    fit: &LmmFit,
    resamples: usize,
    seed: u64,
) -> Result<IccEstimate> {
    let icc = icc_variance_components(fit.vc)?;
    let fitted: Vec<f64> = (0..design.n_obs())
        .map(|r| (0..design.n_fixed()).map(|j| design.design()[(r, j)] * fit.beta[j]).sum())
        .collect();
    let subject = design.subject_of_rows();
    let n_subjects = design.n_subjects();
    let sb = Normal::new(0.0, fit.vc.sigma2_between.sqrt()).expect("finite sd");
    let sw = Normal::new(0.0, fit.vc.sigma2_within.sqrt()).expect("finite sd");
    let mut draws: Vec<f64> = (0..resamples)
        .into_par_iter()
        .filter_map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let u: Vec<f64> = (0..n_subjects).map(|_| sb.sample(&mut rng)).collect();
            let y = fitted.iter().zip(&subject).map(|(f, &s)| f + u[s] + sw.sample(&mut rng)).collect();
            let refit = fit_lmm(&design.with_response(y), fit.criterion).ok()?;
            icc_variance_components(refit.vc).ok()
        })
        .collect();
    if draws.is_empty() {
        return Ok(IccEstimate { icc, ci_low: icc, ci_high: icc });
    }
    draws.sort_by(f64::total_cmp);
    Ok(IccEstimate { icc, ci_low: percentile_linear(&draws, 2.5), ci_high: percentile_linear(&draws, 97.5) })
}

/// ICC(2,1): two-way random effects, absolute agreement, single measures,
/// with the F-based 95% interval. Raters are (MANUAL, AI).
pub fn icc_two_way_single(pairs: &[PairedSample]) -> Result<IccEstimate> {
    let n = pairs.len();
    if n < 3 {
        return Err(StatsError::TooFewUnits { needed: 3, got: n });
    }
    check_finite_pairs(pairs)?;
    let (nf, k) = (n as f64, 2.0);
    let grand = pairs.iter().map(|p| p.manual + p.ai).sum::<f64>() / (k * nf);
    let col = [
        pairs.iter().map(|p| p.manual).sum::<f64>() / nf,
        pairs.iter().map(|p| p.ai).sum::<f64>() / nf,
    ];
    let ss_rows = k * pairs.iter().map(|p| ((p.manual + p.ai) / k - grand).powi(2)).sum::<f64>();
    let ss_cols = nf * col.iter().map(|c| (c - grand).powi(2)).sum::<f64>();
    let ss_total = pairs.iter().map(|p| (p.manual - grand).powi(2) + (p.ai - grand).powi(2)).sum::<f64>();
    let msr = ss_rows / (nf - 1.0);
    let msc = ss_cols / (k - 1.0);
    let mse = ((ss_total - ss_rows - ss_cols) / ((nf - 1.0) * (k - 1.0))).max(0.0);
    let denom = msr + (k - 1.0) * mse + k * (msc - mse) / nf;
    if denom <= 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    let icc = (msr - mse) / denom;

    // Satterthwaite df for the interval; with zero error variance it tends to k-1.
    let v = if mse > 0.0 {
        let fc = msc / mse;
        let a = k * icc * fc + nf * (1.0 + (k - 1.0) * icc) - k * icc;
        let vn = (k - 1.0) * (nf - 1.0) * a * a;
        let vd = (nf - 1.0) * k * k * icc * icc * fc * fc + (nf * (1.0 + (k - 1.0) * icc) - k * icc).powi(2);
        vn / vd
    } else {
        k - 1.0
    };
    let (lo, hi) = match (FisherSnedecor::new(nf - 1.0, v), FisherSnedecor::new(v, nf - 1.0)) {
        (Ok(fu), Ok(fl)) if v.is_finite() && v > 0.0 => {
            let f_u = fu.inverse_cdf(0.975);
            let f_l = fl.inverse_cdf(0.975);
            let c = k * msc + (k * nf - k - nf) * mse;
            (nf * (msr - f_u * mse) / (f_u * c + nf * msr), nf * (f_l * msr - mse) / (c + nf * f_l * msr))
        }
        _ => (f64::NAN, f64::NAN),
    };
    Ok(IccEstimate { icc, ci_low: lo, ci_high: hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlandAltman {
    pub n: usize,
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub mae: f64,
}

impl BlandAltman {
    fn new(n: usize, bias: f64, sd: f64, mae: f64) -> Self {
        Self { n, bias, sd, loa_low: bias - 1.96 * sd, loa_high: bias + 1.96 * sd, mae }
    }
}

pub fn bland_altman_classic(pairs: &[PairedSample]) -> Result<BlandAltman> {
    if pairs.len() < 2 {
        return Err(StatsError::TooFewUnits { needed: 2, got: pairs.len() });
    }
    check_finite_pairs(pairs)?;
    let n = pairs.len() as f64;
    let d: Vec<f64> = pairs.iter().map(PairedSample::difference).collect();
    let bias = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mae = d.iter().map(|x| x.abs()).sum::<f64>() / n;
    Ok(BlandAltman::new(pairs.len(), bias, sd, mae))
}

/// Bland–Altman for repeated measurements: an intercept-only random-intercept
/// model on the per-visit differences; the SD pools both variance components.
pub fn bland_altman_lmm(samples: &[RepeatedSample], criterion: Criterion) -> Result<BlandAltman> {
    let diffs = repeated_differences(samples)?;
    if diffs.len() < 2 {
        return Err(StatsError::TooFewUnits { needed: 2, got: diffs.len() });
    }
    let y: Vec<f64> = diffs.iter().map(|d| d.2).collect();
    let subjects: Vec<String> = diffs.iter().map(|d| d.0.clone()).collect();
    let x = nalgebra::DMatrix::from_element(y.len(), 1, 1.0);
    let mae = y.iter().map(|v| v.abs()).sum::<f64>() / y.len() as f64;
    let fit = fit_lmm(&LmmDesign::new(y, x, &subjects, vec!["intercept".into()])?, criterion)?;
    let sd = (fit.vc.sigma2_within + fit.vc.sigma2_between).sqrt();
    Ok(BlandAltman::new(diffs.len(), fit.beta[0], sd, mae))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AgreementResult {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub mae: f64,
    pub icc: f64,
    pub icc_ci_low: f64,
    pub icc_ci_high: f64,
}

impl AgreementResult {
    pub fn new(ba: &BlandAltman, icc: &IccEstimate) -> Self {
        Self {
            bias: ba.bias,
            loa_low: ba.loa_low,
            loa_high: ba.loa_high,
            mae: ba.mae,
            icc: icc.icc,
            icc_ci_low: icc.ci_low,
            icc_ci_high: icc.ci_high,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{Method, Phase};

    #[test]
    fn tost_examples() {
        let r = tost_equivalence(0.0, 1.0, 5.0, DfMode::Normal).unwrap();
        assert!(r.equivalent);
        assert!((r.ci_high - 1.6448536269514722).abs() < 1e-12);
        let r = tost_equivalence(4.0, 1.0, 5.0, DfMode::Normal).unwrap();
        assert!(!r.equivalent);
        assert!((r.ci_high - 5.6448536).abs() < 1e-7);
        let r = tost_equivalence(0.3, 1.0, 1e9, DfMode::Normal).unwrap();
        assert!(r.p_tost < 1e-12);
        assert_eq!(tost_equivalence(0.0, 1.0, 0.0, DfMode::Normal).unwrap_err(), StatsError::InvalidMargin(0.0));
    }

    #[test]
    fn min_delta_example_and_fixed_point() {
        let (abs, pct) = min_equivalence_margin(2.0, 1.0, 100.0, DfMode::Normal).unwrap();
        assert!((abs - 3.6448536).abs() < 1e-7);
        assert!((pct - 3.6448536).abs() < 1e-7);
        assert!(tost_equivalence(2.0, 1.0, abs * (1.0 + 1e-9), DfMode::Normal).unwrap().equivalent);
        assert!(!tost_equivalence(2.0, 1.0, abs * (1.0 - 1e-9), DfMode::Normal).unwrap().equivalent);
        assert_eq!(min_equivalence_margin(1.0, 1.0, 0.0, DfMode::Normal), Err(StatsError::ZeroManualMean));
        let (tiny, _) = min_equivalence_margin(0.0, 1e-12, 10.0, DfMode::Normal).unwrap();
        assert!(tiny < 1e-11);
    }

    #[test]
    fn vc_icc_examples() {
        let vc = |b, w| VarianceComponents { sigma2_between: b, sigma2_within: w };
        assert_eq!(icc_variance_components(vc(3.0, 1.0)).unwrap(), 0.75);
        assert_eq!(icc_variance_components(vc(0.0, 5.0)).unwrap(), 0.0);
        assert!((icc_variance_components(vc(49.0, 2.0)).unwrap() - 0.960784).abs() < 1e-6);
        assert_eq!(icc_variance_components(vc(0.0, 0.0)), Err(StatsError::BothZero));
    }

    #[test]
    fn icc21_examples() {
        let perfect: Vec<_> = (1..=3).map(|i| PairedSample::new(i.to_string(), i as f64, i as f64)).collect();
        let r = icc_two_way_single(&perfect).unwrap();
        assert_eq!((r.icc, r.ci_low, r.ci_high), (1.0, 1.0, 1.0));
        let offset: Vec<_> = (1..=3).map(|i| PairedSample::new(i.to_string(), i as f64, i as f64 + 1.0)).collect();
        let r = icc_two_way_single(&offset).unwrap();
        assert!((r.icc - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.ci_low < r.icc && r.icc < r.ci_high);
    }

    #[test]
    fn icc21_interval_matches_reference_values() {
        // expected values from scipy's F quantiles applied to the same table
        let m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let a = [1.5, 1.8, 3.6, 3.9, 5.2, 6.4];
        let pairs: Vec<_> = m.iter().zip(a).enumerate().map(|(i, (&m, a))| PairedSample::new(i.to_string(), m, a)).collect();
        let r = icc_two_way_single(&pairs).unwrap();
        assert!((r.icc - 0.9799346710219319).abs() < 1e-12);
        assert!((r.ci_low - 0.8533967470198988).abs() < 1e-6, "{}", r.ci_low);
        assert!((r.ci_high - 0.9971993977521662).abs() < 1e-6, "{}", r.ci_high);
    }

    #[test]
    fn bland_altman_examples() {
        let ones: Vec<_> = (0..4).map(|i| PairedSample::new(i.to_string(), i as f64, i as f64 + 1.0)).collect();
        let r = bland_altman_classic(&ones).unwrap();
        assert_eq!((r.bias, r.loa_low, r.loa_high, r.mae), (1.0, 1.0, 1.0, 1.0));
        let pm = [PairedSample::new("a", 0.0, -1.0), PairedSample::new("b", 0.0, 1.0)];
        let r = bland_altman_classic(&pm).unwrap();
        assert_eq!(r.bias, 0.0);
        assert!((r.loa_high - 1.96 * 2f64.sqrt()).abs() < 1e-12);
        assert!((r.loa_high - 2.7719).abs() < 1e-4);
    }

    fn repeated(diffs: &[(&str, Phase, f64)]) -> Vec<RepeatedSample> {
        diffs
            .iter()
            .flat_map(|&(s, phase, d)| {
                [
                    RepeatedSample { subject_id: s.into(), phase, method: Method::Manual, value: 100.0 },
                    RepeatedSample { subject_id: s.into(), phase, method: Method::Ai, value: 100.0 + d },
                ]
            })
            .collect()
    }

    #[test]
    fn lmm_bland_altman_reduces_and_translates() {
        // every subject has the same set of differences: no between-subject variance
        let mut diffs = Vec::new();
        for s in ["a", "b", "c"] {
            diffs.push((s, Phase::Baseline, -1.0));
            diffs.push((s, Phase::Bedrest, 0.5));
            diffs.push((s, Phase::Recovery, 2.0));
        }
        let samples = repeated(&diffs);
        let lmm = bland_altman_lmm(&samples, Criterion::Reml).unwrap();
        let pairs: Vec<_> = diffs.iter().enumerate().map(|(i, d)| PairedSample::new(i.to_string(), 0.0, d.2)).collect();
        let classic = bland_altman_classic(&pairs).unwrap();
        assert!((lmm.loa_low - classic.loa_low).abs() < 1e-6);
        assert!((lmm.loa_high - classic.loa_high).abs() < 1e-6);

        let shifted: Vec<_> = samples
            .iter()
            .map(|s| RepeatedSample { value: s.value + if s.method == Method::Ai { 3.0 } else { 0.0 }, ..s.clone() })
            .collect();
        let moved = bland_altman_lmm(&shifted, Criterion::Reml).unwrap();
        assert!((moved.bias - lmm.bias - 3.0).abs() < 1e-9);
        assert!(((moved.loa_high - moved.loa_low) - (lmm.loa_high - lmm.loa_low)).abs() < 1e-9);
    }
}
