//! Random-intercept linear mixed model.
//!
//! With one random intercept per subject the marginal covariance of subject
//! `i` is `σ²_w (I + λJ)`, λ = σ²_b / σ²_w, whose inverse is
//! `I - λ/(1 + nλ) J` and whose log-determinant is `ln(1 + nλ)`. The
//! likelihood is profiled over σ²_w and β, leaving a scalar search in ln λ.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Method, Phase, RepeatedSample, Result, StatsError};

pub const METHOD_EFFECT: &str = "method[AI]";

const THETA_MIN: f64 = -25.0;
const THETA_MAX: f64 = 20.0;
const GRID_STEP: f64 = 0.25;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Criterion {
    #[default]
    Reml,
    Ml,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma2_between: f64,
    pub sigma2_within: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmmFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se_beta: Vec<f64>,
    pub vc: VarianceComponents,
    pub log_likelihood: f64,
    pub converged: bool,
    pub criterion: Criterion,
    pub n_obs: usize,
    pub n_subjects: usize,
    pub notes: Vec<String>,
}

impl LmmFit {
    /// Estimate and standard error of a named fixed effect.
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.beta[i], self.se_beta[i]))
    }
}

/// One subject's rows with the cross-products the profile needs.
struct Group {
    rows: Vec<usize>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    /// Column sums of the subject's design rows.
    s: DVector<f64>,
    ty: f64,
}

impl Group {
    fn new(x: &DMatrix<f64>, y: &[f64], rows: Vec<usize>) -> Self {
        let sub = x.select_rows(&rows);
        let ys = DVector::from_iterator(rows.len(), rows.iter().map(|&r| y[r]));
        Self {
            xtx: sub.tr_mul(&sub),
            xty: sub.tr_mul(&ys),
            s: sub.row_sum().transpose(),
            ty: ys.sum(),
            rows,
        }
    }
}

/// Response, fixed-effect design and subject grouping.
pub struct LmmDesign {
    y: Vec<f64>,
    x: DMatrix<f64>,
    names: Vec<String>,
    groups: Vec<Group>,
}

struct Profile {
    beta: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ln_det_a: f64,
    q: f64,
    ln_det_h: f64,
}

impl LmmDesign {
    pub fn new(y: Vec<f64>, x: DMatrix<f64>, subjects: &[String], names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || subjects.len() != n || names.len() != x.ncols() {
            return Err(StatsError::TooFewUnits { needed: n, got: x.nrows().min(subjects.len()) });
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in subjects.iter().enumerate() {
            by.entry(s).or_default().push(i);
        }
        if by.len() < 2 {
            return Err(StatsError::TooFewSubjects(by.len()));
        }
        if n <= x.ncols() {
            return Err(StatsError::TooFewUnits { needed: x.ncols() + 1, got: n });
        }
        if by.values().all(|rows| rows.len() < 2) {
            return Err(StatsError::TooFewUnits { needed: 2, got: 1 });
        }
        let sv = x.clone().svd(false, false).singular_values;
        let max = sv.max();
        if x.ncols() == 0 || max == 0.0 || sv.min() <= max * 1e-10 {
            return Err(StatsError::RankDeficientDesign);
        }
        let groups = by.into_values().map(|rows| Group::new(&x, &y, rows)).collect();
        Ok(Self { y, x, names, groups })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_subjects(&self) -> usize {
        self.groups.len()
    }

    pub fn response(&self) -> &[f64] {
        &self.y
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Subject index of each observation, in the order subjects sort.
    pub fn subject_of_rows(&self) -> Vec<usize> {
        let mut out = vec![0; self.y.len()];
        for (g, group) in self.groups.iter().enumerate() {
            for &r in &group.rows {
                out[r] = g;
            }
        }
        out
    }

    pub fn with_response(&self, y: Vec<f64>) -> Self {
        assert_eq!(y.len(), self.y.len());
        let groups = self.groups.iter().map(|g| Group::new(&self.x, &y, g.rows.clone())).collect();
        Self { y, x: self.x.clone(), names: self.names.clone(), groups }
    }

    fn profile(&self, lambda: f64) -> Option<Profile> {
        let p = self.x.ncols();
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut b = DVector::<f64>::zeros(p);
        let mut ln_det_h = 0.0;
        for g in &self.groups {
            let ni = g.rows.len() as f64;
            let c = lambda / (1.0 + ni * lambda);
            ln_det_h += (ni * lambda).ln_1p();
            for j in 0..p {
                b[j] += g.xty[j] - c * g.s[j] * g.ty;
                for k in 0..p {
                    a[(j, k)] += g.xtx[(j, k)] - c * g.s[j] * g.s[k];
                }
            }
        }
        let chol = a.clone().cholesky()?;
        let beta = chol.solve(&b);
        let mut q = 0.0;
        for g in &self.groups {
            let ni = g.rows.len() as f64;
            let c = lambda / (1.0 + ni * lambda);
            let mut rs = 0.0;
            for &r in &g.rows {
                let fitted: f64 = (0..p).map(|j| self.x[(r, j)] * beta[j]).sum();
                let e = self.y[r] - fitted;
                q += e * e;
                rs += e;
            }
            q -= c * rs * rs;
        }
        Some(Profile { beta, ln_det_a: chol.ln_determinant(), chol, q: q.max(0.0), ln_det_h })
    }

    fn dof(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Reml => (self.y.len() - self.x.ncols()) as f64,
            Criterion::Ml => self.y.len() as f64,
        }
    }

    fn profiled_loglik(&self, lambda: f64, criterion: Criterion) -> f64 {
        let Some(pr) = self.profile(lambda) else {
            return f64::NEG_INFINITY;
        };
        let nu = self.dof(criterion);
        let sigma2 = pr.q / nu;
        let mut ll = nu * (1.0 + (2.0 * PI * sigma2).ln()) + pr.ln_det_h;
        if criterion == Criterion::Reml {
            ll += pr.ln_det_a;
        }
        -0.5 * ll
    }

    /// Log-likelihood (restricted or full) at arbitrary variance components,
    /// with β at its generalized least-squares value.
    pub fn log_likelihood(&self, vc: VarianceComponents, criterion: Criterion) -> f64 {
        let VarianceComponents { sigma2_between: sb, sigma2_within: sw } = vc;
        if !(sw > 0.0) || sb < 0.0 {
            return f64::NEG_INFINITY;
        }
        let Some(pr) = self.profile(sb / sw) else {
            return f64::NEG_INFINITY;
        };
        let n = self.y.len() as f64;
        let p = self.x.ncols() as f64;
        let mut ll = n * sw.ln() + pr.ln_det_h + pr.q / sw;
        match criterion {
            Criterion::Reml => ll += (n - p) * (2.0 * PI).ln() + pr.ln_det_a - p * sw.ln(),
            Criterion::Ml => ll += n * (2.0 * PI).ln(),
        }
        -0.5 * ll
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd { (c, fc) } else { (d, fd) }
}

/// Profiled criterion as a function of ln λ, for inspection and plotting.
pub fn reml_profile(design: &LmmDesign, criterion: Criterion, theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|t| design.profiled_loglik(t.exp(), criterion)).collect()
}

pub fn fit_lmm(design: &LmmDesign, criterion: Criterion) -> Result<LmmFit> {
    let mut notes = Vec::new();
    let ols = design.profile(0.0).ok_or(StatsError::RankDeficientDesign)?;
    let nu = design.dof(criterion);
    let scale = design.y.iter().map(|v| v * v).sum::<f64>() / design.y.len() as f64;

    let (lambda, ll, converged) = if ols.q <= scale * 1e-24 {
        notes.push("exact fit: residual variance is zero".to_string());
        (0.0, f64::INFINITY, true)
    } else {
        let f = |t: f64| design.profiled_loglik(t.exp(), criterion);
        let n_grid = ((THETA_MAX - THETA_MIN) / GRID_STEP).round() as usize;
        let (mut best_t, mut best) = (THETA_MIN, f(THETA_MIN));
        for k in 1..=n_grid {
            let t = THETA_MIN + k as f64 * GRID_STEP;
            let v = f(t);
            if v > best {
                (best_t, best) = (t, v);
            }
        }
        let (t, v) = golden_max(f, best_t - GRID_STEP, best_t + GRID_STEP, 1e-10);
        let (t, v) = if v >= best { (t, v) } else { (best_t, best) };
        let at_zero = design.profiled_loglik(0.0, criterion);
        let interior_ok = t < THETA_MAX - GRID_STEP;
        if !v.is_finite() && !at_zero.is_finite() {
            return Err(StatsError::NotConverged("log-likelihood is not finite".into()));
        }
        if at_zero >= v || t <= THETA_MIN + GRID_STEP {
            notes.push("boundary: between-subject variance estimated at zero".to_string());
            (0.0, at_zero, true)
        } else {
            if !interior_ok {
                notes.push("variance ratio at the search bound".to_string());
            }
            (t.exp(), v, interior_ok)
        }
    };

    let pr = design.profile(lambda).ok_or(StatsError::RankDeficientDesign)?;
    let sigma2 = pr.q / nu;
    let a_inv = pr.chol.inverse();
    let se_beta = (0..design.x.ncols()).map(|i| (sigma2 * a_inv[(i, i)]).max(0.0).sqrt()).collect();
    Ok(LmmFit {
        names: design.names.clone(),
        beta: pr.beta.iter().copied().collect(),
        se_beta,
        vc: VarianceComponents { sigma2_between: lambda * sigma2, sigma2_within: sigma2 },
        log_likelihood: ll,
        converged,
        criterion,
        n_obs: design.n_obs(),
        n_subjects: design.n_subjects(),
        notes,
    })
}

/// Build `value ~ 1 + method + phase` with a subject random intercept.
/// MANUAL and the earliest phase present are the reference levels.
pub fn repeated_design(samples: &[RepeatedSample]) -> Result<LmmDesign> {
    if samples.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let phases: Vec<Phase> = {
        let mut p: Vec<Phase> = samples.iter().map(|s| s.phase).collect();
        p.sort();
        p.dedup();
        p
    };
    let methods = samples.iter().any(|s| s.method == Method::Ai) && samples.iter().any(|s| s.method == Method::Manual);
    let mut names = vec!["intercept".to_string()];
    if methods {
        names.push(METHOD_EFFECT.to_string());
    }
    names.extend(phases.iter().skip(1).map(|p| format!("phase[{}]", p.as_str())));
    let p = names.len();
    let mut x = DMatrix::<f64>::zeros(samples.len(), p);
    for (i, s) in samples.iter().enumerate() {
        x[(i, 0)] = 1.0;
        let mut col = 1;
        if methods {
            x[(i, col)] = if s.method == Method::Ai { 1.0 } else { 0.0 };
            col += 1;
        }
        for ph in phases.iter().skip(1) {
            x[(i, col)] = if s.phase == *ph { 1.0 } else { 0.0 };
            col += 1;
        }
    }
    let y = samples.iter().map(|s| s.value).collect();
    let subjects: Vec<String> = samples.iter().map(|s| s.subject_id.clone()).collect();
    LmmDesign::new(y, x, &subjects, names)
}

pub fn fit_random_intercept_lmm(samples: &[RepeatedSample], criterion: Criterion) -> Result<LmmFit> {
    fit_lmm(&repeated_design(samples)?, criterion)
}
