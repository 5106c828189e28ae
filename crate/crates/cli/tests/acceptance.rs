//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use paraseg_core::backend::{BackendDescriptor, BackendKind, ScoredMask};
use paraseg_core::mask::{dice, iou, largest_component_per_class, slice_areas};
use paraseg_core::phantom::{phantom_study, EllipseSpec, PhantomModality, PhantomSpec, TissueSpec};
use paraseg_core::pipeline::{BackendSet, RunConfig};
use paraseg_core::plan::{FrameRef, FrameRole};
use paraseg_core::quant::{dixon_fat_ratio, mean_attenuation, muscle_volume, quantify_dataset, QuantInput};
use paraseg_core::report::{format_table, StatsOptions, STATS_HEADER};
use paraseg_core::selection::{select_stage1, select_top_fraction, PseudoLabel, SelectionConfig};
use paraseg_core::stats::{
    bland_altman_classic, bland_altman_lmm, fit_lmm, icc_two_way_single, min_equivalence_margin, tost_equivalence,
    Criterion, DfMode, LmmDesign, Method, PairedSample, Phase, RepeatedSample, VarianceComponents,
};
use paraseg_core::{Dims, LabelVolume, Side, SliceMask, VoxelSpacing};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- metrics

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Largest 26-connected component per class by union-find; roots are the
/// smallest member index, which is also the tie-break.
fn oracle_largest_component(a: &[u8], nx: usize, ny: usize, nz: usize) -> Vec<u8> {
    let at = |x: usize, y: usize, z: usize| z * nx * ny + y * nx + x;
    let mut uf = UnionFind((0..a.len()).collect());
    let (nx, ny, nz) = (nx as i64, ny as i64, nz as i64);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = at(x as usize, y as usize, z as usize);
                if a[i] == 0 {
                    continue;
                }
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (x2, y2, z2) = (x + dx, y + dy, z + dz);
                            if x2 < 0 || y2 < 0 || z2 < 0 || x2 >= nx || y2 >= ny || z2 >= nz {
                                continue;
                            }
                            let j = at(x2 as usize, y2 as usize, z2 as usize);
                            if a[j] == a[i] {
                                uf.union(i, j);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..a.len() {
        if a[i] != 0 {
            *sizes.entry(uf.find(i)).or_default() += 1;
        }
    }
    let mut keep = HashSet::new();
    for class in [1u8, 2] {
        let best = sizes
            .iter()
            .filter(|(&r, _)| a[r] == class)
            .max_by(|(ra, sa), (rb, sb)| sa.cmp(sb).then(rb.cmp(ra)));
        if let Some((&r, _)) = best {
            keep.insert(r);
        }
    }
    (0..a.len()).map(|i| if a[i] != 0 && keep.contains(&uf.find(i)) { a[i] } else { 0 }).collect()
}

fn metric_oracle() -> Outcome {
    let (nx, ny, nz) = (16, 16, 4);
    let dims = Dims::new(nx, ny, nz).unwrap();
    let sp = VoxelSpacing::new(0.7, 0.7, 5.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let density: f64 = rng.random_range(0.02..0.7);
        let mut gen = |empty: bool| -> Vec<u8> {
            (0..dims.len())
                .map(|_| if !empty && rng.random_bool(density) { rng.random_range(1..=2u8) } else { 0 })
                .collect()
        };
        let a = gen(false);
        let b = gen(case % 97 == 0);
        for class in [1u8, 2] {
            let sa: HashSet<usize> = (0..a.len()).filter(|&i| a[i] == class).collect();
            let sb: HashSet<usize> = (0..b.len()).filter(|&i| b[i] == class).collect();
            let inter = sa.intersection(&sb).count();
            let union = sa.union(&sb).count();
            let d = if sa.len() + sb.len() == 0 { 1.0 } else { 2.0 * inter as f64 / (sa.len() + sb.len()) as f64 };
            let j = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            let got_d = dice(&a, &b, class).map_err(|e| e.to_string())?;
            let got_j = iou(&a, &b, class).map_err(|e| e.to_string())?;
            ensure!(got_d == d, "case {case} class {class}: dice {got_d} vs oracle {d}");
            ensure!(got_j == j, "case {case} class {class}: iou {got_j} vs oracle {j}");
            let vol = LabelVolume::new(dims, sp, a.clone()).unwrap();
            for (z, s) in slice_areas(&vol).iter().enumerate() {
                let n = sa.iter().filter(|&&i| i / (nx * ny) == z).count();
                ensure!(s.area_px[class as usize - 1] == n, "case {case} slice {z}: area {:?} vs {n}", s.area_px);
            }
        }
        let vol = LabelVolume::new(dims, sp, a.clone()).unwrap();
        let got = largest_component_per_class(&vol);
        ensure!(
            got.data() == oracle_largest_component(&a, nx, ny, nz).as_slice(),
            "case {case}: largest component differs from oracle"
        );
    }
    Ok("1000 volumes, dice/iou/areas/largest component identical".into())
}

// ---------------------------------------------------------- quantification

/// Lattice points inside the ellipse on slice `z`, counted row by row from
/// the half-width of each chord.
fn ellipse_count(e: &EllipseSpec, z: usize, nx: usize, ny: usize) -> usize {
    let zf = z as f64;
    let s = 1.0 + e.growth * zf;
    let (cx, cy, rx, ry) = (e.cx + e.drift_x * zf, e.cy + e.drift_y * zf, e.rx * s, e.ry * s);
    let mut n = 0;
    for y in 0..ny {
        let v = (y as f64 - cy) / ry;
        if v * v > 1.0 {
            continue;
        }
        let w = rx * (1.0 - v * v).sqrt();
        let lo = (cx - w).ceil().max(0.0) as i64;
        let hi = (cx + w).floor().min(nx as f64 - 1.0) as i64;
        n += (hi - lo + 1).max(0) as usize;
    }
    n
}

fn quantification_exactness() -> Outcome {
    let tissue = TissueSpec { jitter: 0.0, ..Default::default() };
    let mut checked = 0;
    for modality in [PhantomModality::Ct, PhantomModality::Dixon] {
        let spec = PhantomSpec { modality, n_studies: 4, sigma: 0.0, tissue, seed: 5, ..Default::default() };
        let studies: Vec<_> = (0..spec.n_studies).map(|i| phantom_study(&spec, i).unwrap()).collect();
        let range = spec.disc_indices().range();
        let inputs: Vec<QuantInput> = studies
            .iter()
            .map(|s| QuantInput { study_id: &s.truth.study_id, image: &s.image, fat: s.fat.as_ref(), range: range.clone() })
            .collect();
        let masks: BTreeMap<String, LabelVolume> =
            studies.iter().map(|s| (s.truth.study_id.clone(), s.labels.clone())).collect();
        let table = quantify_dataset("q", &inputs, &masks, &masks).map_err(|e| e.to_string())?;
        for s in &studies {
            let sp = s.truth.spacing;
            for (side, e) in [(Side::Left, &spec.left), (Side::Right, &spec.right)] {
                let voxels: usize = range.clone().map(|z| ellipse_count(e, z, spec.nx, spec.ny)).sum();
                let volume = voxels as f64 * sp.dx * sp.dy * sp.dz / 1000.0;
                let v = muscle_volume(&s.labels, side);
                ensure!(rel_close(v, volume, 1e-9), "{} {side:?}: volume {v} vs analytic {volume}", s.truth.study_id);
                let (hu, fr) = match modality {
                    PhantomModality::Ct => {
                        let hu = mean_attenuation(&s.labels, &s.image, side).map_err(|e| e.to_string())?;
                        ensure!(rel_close(hu, tissue.muscle_hu, 1e-9), "mean HU {hu} vs {}", tissue.muscle_hu);
                        (Some(tissue.muscle_hu), None)
                    }
                    PhantomModality::Dixon => {
                        let expected = tissue.muscle_fat / (tissue.muscle_fat + tissue.muscle_water);
                        let fr = dixon_fat_ratio(&s.labels, s.fat.as_ref().unwrap(), &s.image, side)
                            .map_err(|e| e.to_string())?;
                        ensure!(rel_close(fr, expected, 1e-9), "fat ratio {fr} vs {expected}");
                        (None, Some(expected))
                    }
                };
                for r in table.records.iter().filter(|r| r.study_id == s.truth.study_id && r.side == side) {
                    ensure!(rel_close(r.volume_ml, volume, 1e-9), "table volume {} vs {volume}", r.volume_ml);
                    ensure!(
                        r.mean_hu.is_some() == hu.is_some() && r.fat_ratio.is_some() == fr.is_some(),
                        "table columns present for the wrong modality"
                    );
                    if let (Some(a), Some(b)) = (r.mean_hu, hu) {
                        ensure!(rel_close(a, b, 1e-9), "table HU {a} vs {b}");
                    }
                    if let (Some(a), Some(b)) = (r.fat_ratio, fr) {
                        ensure!(rel_close(a, b, 1e-9), "table fat ratio {a} vs {b}");
                    }
                    checked += 1;
                }
            }
        }
    }
    ensure!(checked == 32, "expected 32 table records, checked {checked}");
    Ok(format!("{checked} records match closed form within 1e-9"))
}

// --------------------------------------------------------------------- LMM

fn one_way_design(groups: &[Vec<f64>]) -> LmmDesign {
    let mut y = Vec::new();
    let mut s = Vec::new();
    for (g, vals) in groups.iter().enumerate() {
        for &v in vals {
            y.push(v);
            s.push(format!("g{g:02}"));
        }
    }
    let n = y.len();
    LmmDesign::new(y, DMatrix::from_element(n, 1, 1.0), &s, vec!["intercept".into()]).unwrap()
}

/// REML estimates of a balanced one-way layout from the ANOVA table,
/// truncated at zero between-group variance.
fn anova_reml(groups: &[Vec<f64>]) -> (f64, f64) {
    let m = groups.len() as f64;
    let n = groups[0].len() as f64;
    let grand = groups.iter().flatten().sum::<f64>() / (m * n);
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / n).collect();
    let ssb = n * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let ssw: f64 = groups.iter().zip(&means).map(|(g, mu)| g.iter().map(|x| (x - mu).powi(2)).sum::<f64>()).sum();
    let msb = ssb / (m - 1.0);
    let msw = ssw / (m * (n - 1.0));
    if msb > msw {
        ((msb - msw) / n, msw)
    } else {
        (0.0, (ssb + ssw) / (m * n - 1.0))
    }
}

fn lmm_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut fixtures = 0;
    let mut grids = 0;
    for m in 2..=6 {
        for n in 2..=8 {
            for rep in 0..4 {
                let sb: f64 = [0.0, 0.3, 1.0, 4.0][rep];
                let groups: Vec<Vec<f64>> = (0..m)
                    .map(|_| {
                        let u = sb.sqrt() * rng.random_range(-1.7..1.7);
                        (0..n).map(|_| 10.0 + u + rng.random_range(-1.7..1.7)).collect()
                    })
                    .collect();
                let design = one_way_design(&groups);
                let fit = fit_lmm(&design, Criterion::Reml).map_err(|e| e.to_string())?;
                let (b, w) = anova_reml(&groups);
                let scale = b + w;
                ensure!(
                    (fit.vc.sigma2_within - w).abs() <= 1e-4 * w,
                    "m={m} n={n}: within {} vs {w}",
                    fit.vc.sigma2_within
                );
                ensure!(
                    (fit.vc.sigma2_between - b).abs() <= 1e-4 * b.max(1e-3 * scale),
                    "m={m} n={n}: between {} vs {b}",
                    fit.vc.sigma2_between
                );
                fixtures += 1;
                if rep == 2 {
                    let ll = design.log_likelihood(fit.vc, Criterion::Reml);
                    ensure!((ll - fit.log_likelihood).abs() <= 1e-6, "reported log-likelihood {} vs {ll}", fit.log_likelihood);
                    for i in 0..50 {
                        for j in 0..50 {
                            let vc = VarianceComponents {
                                sigma2_between: 3.0 * scale * i as f64 / 49.0,
                                sigma2_within: w * (0.1 + 2.9 * j as f64 / 49.0),
                            };
                            let g = design.log_likelihood(vc, Criterion::Reml);
                            ensure!(g <= ll + 1e-6, "m={m} n={n}: grid point {vc:?} beats the fit ({g} > {ll})");
                        }
                    }
                    grids += 1;
                }
            }
        }
    }
    Ok(format!("{fixtures} balanced fixtures within 1e-4, {grids} 50x50 grids dominated"))
}

// --------------------------------------------------------------------- TOST

fn tost_duality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut equivalent = 0;
    for i in 0..10_000 {
        let beta: f64 = rng.random_range(-5.0..5.0);
        let se: f64 = rng.random_range(0.01..3.0);
        let delta: f64 = rng.random_range(0.01..12.0);
        let mode = if i % 2 == 0 { DfMode::Normal } else { DfMode::StudentT { df: rng.random_range(1..60) as f64 } };
        let r = tost_equivalence(beta, se, delta, mode).map_err(|e| e.to_string())?;
        let q = mode.quantile(0.95);
        let (lo, hi) = (beta - q * se, beta + q * se);
        let inside = -delta < lo && hi < delta;
        ensure!(r.equivalent == inside, "triple {i}: verdict {} but CI ({lo}, {hi}) vs ±{delta}", r.equivalent);
        if (r.p_tost - 0.05).abs() > 1e-9 {
            ensure!(r.equivalent == (r.p_tost < 0.05), "triple {i}: verdict {} with p = {}", r.equivalent, r.p_tost);
        }
        equivalent += r.equivalent as usize;
        let (md, _) = min_equivalence_margin(beta, se, 1.0, mode).map_err(|e| e.to_string())?;
        ensure!((md - r.min_delta_abs).abs() <= 1e-9 * md, "triple {i}: Min δ {md} vs {}", r.min_delta_abs);
        let above = tost_equivalence(beta, se, md * (1.0 + 1e-9), mode).unwrap();
        let below = tost_equivalence(beta, se, md * (1.0 - 1e-9), mode).unwrap();
        ensure!(above.equivalent && !below.equivalent, "triple {i}: Min δ {md} is not the pass/fail boundary");
    }
    Ok(format!("10000 triples ({equivalent} equivalent), verdict ⇔ 90% CI, Min δ fixed point within 1e-9"))
}

// ---------------------------------------------------------------------- ICC

/// ICC(2,1) from a two-way ANOVA table over an n×k rating matrix.
fn oracle_icc21(ratings: &[[f64; 2]]) -> f64 {
    let n = ratings.len();
    let k = 2;
    let all: Vec<f64> = ratings.iter().flatten().copied().collect();
    let grand = all.iter().sum::<f64>() / (n * k) as f64;
    let sst: f64 = all.iter().map(|x| (x - grand).powi(2)).sum();
    let ssr: f64 = ratings.iter().map(|r| k as f64 * (r.iter().sum::<f64>() / k as f64 - grand).powi(2)).sum();
    let ssc: f64 = (0..k).map(|j| n as f64 * (ratings.iter().map(|r| r[j]).sum::<f64>() / n as f64 - grand).powi(2)).sum();
    let sse = sst - ssr - ssc;
    let msr = ssr / (n - 1) as f64;
    let msc = ssc / (k - 1) as f64;
    let mse = sse / ((n - 1) * (k - 1)) as f64;
    (msr - mse) / (msr + (k as f64 - 1.0) * mse + k as f64 * (msc - mse) / n as f64)
}

fn icc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for f in 0..100 {
        let bias: f64 = rng.random_range(-3.0..3.0);
        let noise: f64 = rng.random_range(0.05..5.0);
        let ratings: Vec<[f64; 2]> = (0..20)
            .map(|_| {
                let t: f64 = rng.random_range(20.0..80.0);
                [t + rng.random_range(-noise..noise), t + bias + rng.random_range(-noise..noise)]
            })
            .collect();
        let pairs: Vec<PairedSample> =
            ratings.iter().enumerate().map(|(i, r)| PairedSample::new(format!("u{i}"), r[0], r[1])).collect();
        let got = icc_two_way_single(&pairs).map_err(|e| e.to_string())?.icc;
        let want = oracle_icc21(&ratings);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "fixture {f}: ICC {got} vs oracle {want}");
    }
    Ok(format!("100 fixtures, max |Δ| = {worst:.1e}"))
}

// ----------------------------------------------------------- Bland–Altman

fn bland_altman_reduction() -> Outcome {
    let phases = [Phase::Baseline, Phase::Bedrest, Phase::Recovery];
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for case in 0..20 {
        // each subject's differences sum to the same total, so the
        // between-subject mean square is zero
        let offset: f64 = rng.random_range(-2.0..2.0);
        let mut samples = Vec::new();
        let mut pairs = Vec::new();
        for s in 0..8 {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let e = [a, b, -a - b];
            for (p, &ph) in phases.iter().enumerate() {
                let manual: f64 = rng.random_range(50.0..150.0);
                let ai = manual + offset + e[p];
                let subject = format!("s{s}");
                samples.push(RepeatedSample { subject_id: subject.clone(), phase: ph, method: Method::Manual, value: manual });
                samples.push(RepeatedSample { subject_id: subject.clone(), phase: ph, method: Method::Ai, value: ai });
                pairs.push(PairedSample::new(format!("{subject}/{}", ph.as_str()), manual, ai));
            }
        }
        let lmm = bland_altman_lmm(&samples, Criterion::Reml).map_err(|e| e.to_string())?;
        let classic = bland_altman_classic(&pairs).map_err(|e| e.to_string())?;
        for (name, a, b) in [
            ("bias", lmm.bias, classic.bias),
            ("sd", lmm.sd, classic.sd),
            ("loa_low", lmm.loa_low, classic.loa_low),
            ("loa_high", lmm.loa_high, classic.loa_high),
        ] {
            ensure!((a - b).abs() <= 1e-6, "case {case}: {name} {a} vs classic {b}");
        }
    }

    // LoA from fitted components on data with real between-subject variance
    let mut samples = Vec::new();
    let mut diffs = Vec::new();
    let mut subjects = Vec::new();
    for s in 0..10 {
        let u: f64 = rng.random_range(-2.0..2.0);
        for &ph in &phases {
            let manual: f64 = rng.random_range(50.0..150.0);
            let d = 0.7 + u + rng.random_range(-0.5..0.5);
            let subject = format!("s{s}");
            samples.push(RepeatedSample { subject_id: subject.clone(), phase: ph, method: Method::Manual, value: manual });
            let ai = manual + d;
            samples.push(RepeatedSample { subject_id: subject.clone(), phase: ph, method: Method::Ai, value: ai });
            diffs.push(ai - manual);
            subjects.push(subject);
        }
    }
    let ba = bland_altman_lmm(&samples, Criterion::Reml).map_err(|e| e.to_string())?;
    let n = diffs.len();
    let design = LmmDesign::new(diffs, DMatrix::from_element(n, 1, 1.0), &subjects, vec!["intercept".into()]).unwrap();
    let fit = fit_lmm(&design, Criterion::Reml).map_err(|e| e.to_string())?;
    let sd = (fit.vc.sigma2_within + fit.vc.sigma2_between).sqrt();
    ensure!(fit.vc.sigma2_between > 0.0, "fixture should have between-subject variance");
    ensure!(rel_close(ba.bias, fit.beta[0], 1e-12), "bias {} vs fixed intercept {}", ba.bias, fit.beta[0]);
    ensure!(ba.sd == sd, "overall sd {} vs sqrt of fitted components {sd}", ba.sd);
    ensure!(ba.loa_low == ba.bias - 1.96 * sd, "loa_low {} vs {}", ba.loa_low, ba.bias - 1.96 * sd);
    ensure!(ba.loa_high == ba.bias + 1.96 * sd, "loa_high {} vs {}", ba.loa_high, ba.bias + 1.96 * sd);
    Ok("20 zero-between fixtures reduce within 1e-6; LoA = bias ± 1.96·sd exactly".into())
}

// ---------------------------------------------------------------- selection

fn pseudo(study: &str, z: usize, depth: usize, confidence: f64) -> PseudoLabel {
    PseudoLabel {
        scored: ScoredMask {
            frame: FrameRef { study_id: study.into(), slice_index: z, role: FrameRole::Inference },
            mask: SliceMask { study_id: study.into(), slice_index: z, nx: 2, ny: 2, labels: vec![0, 1, 2, 0] },
            confidence,
        },
        position: z,
        depth,
    }
}

fn expected_count(p: f64, n: usize) -> usize {
    // ceil(p·n) evaluated on the exact rational p = k/100
    let k = (p * 100.0).round() as usize;
    ((k * n).div_ceil(100)).max(1)
}

fn oracle_order(items: &[PseudoLabel]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (&items[a], &items[b]);
        y.confidence()
            .partial_cmp(&x.confidence())
            .unwrap()
            .then(x.study_id().cmp(y.study_id()))
            .then(x.slice_index().cmp(&y.slice_index()))
    });
    idx
}

fn selected_keys(items: &[PseudoLabel], cfg: &SelectionConfig) -> Result<BTreeSet<(String, usize)>, String> {
    let pool = BTreeMap::from([("d".to_string(), items.to_vec())]);
    let (sel, report) = select_stage1(&pool, cfg).map_err(|e| e.to_string())?;
    if report.selected_count != sel.len() {
        return Err("report count disagrees with selection".into());
    }
    Ok(sel.iter().map(|(_, p)| (p.study_id().to_string(), p.slice_index())).collect())
}

fn selection_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for n in [1usize, 7, 10, 50, 200] {
        let depth = 20;
        // confidences on a coarse grid so ties are common
        let items: Vec<PseudoLabel> = (0..n)
            .map(|i| pseudo(&format!("s{:02}", i / depth), i % depth, depth, rng.random_range(0..20) as f64 / 20.0))
            .collect();
        let order = oracle_order(&items);
        let key = |i: usize| (items[i].study_id().to_string(), items[i].slice_index());

        // a single position bin makes stage 1 a plain top-fraction selection
        let flat = SelectionConfig { position_bins: 1, ..Default::default() };
        let got = selected_keys(&items, &flat)?;
        let k = expected_count(flat.p_dataset, n);
        let want: BTreeSet<_> = order.iter().take(k).map(|&i| key(i)).collect();
        ensure!(got.len() == k, "N={n}: stage 1 selected {} not {k}", got.len());
        ensure!(got == want, "N={n}: stage 1 tie-break differs from the oracle");

        // default bins: dataset-level top plus per-bin top, as a union
        let cfg = SelectionConfig::default();
        let mut want: BTreeSet<_> = order.iter().take(expected_count(cfg.p_dataset, n)).map(|&i| key(i)).collect();
        let mut bins: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &order {
            let b = (cfg.position_bins * items[i].position / depth).min(cfg.position_bins - 1);
            bins.entry(b).or_default().push(i);
        }
        for members in bins.values() {
            want.extend(members.iter().take(expected_count(cfg.p_slice, members.len())).map(|&i| key(i)));
        }
        let got = selected_keys(&items, &cfg)?;
        ensure!(got == want, "N={n}: binned stage 1 differs from the oracle");

        for c in [0.5, 0.01] {
            let scaled: Vec<PseudoLabel> = items
                .iter()
                .map(|p| pseudo(p.study_id(), p.slice_index(), depth, p.confidence() * c))
                .collect();
            ensure!(selected_keys(&scaled, &cfg)? == got, "N={n}: stage 1 changes when confidences scale by {c}");
        }

        let scored: Vec<(String, f64)> = (0..n).map(|i| (format!("id{:03}", (i * 37) % n), rng.random_range(0..5) as f64)).collect();
        for p in [0.10, 0.20] {
            let got = select_top_fraction(&scored, p).map_err(|e| e.to_string())?;
            let mut sorted = scored.clone();
            sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<String> = sorted.iter().take(expected_count(p, n)).map(|s| s.0.clone()).collect();
            ensure!(got == want, "N={n} p={p}: top fraction {got:?} vs {want:?}");
            for c in [0.5, 3.0, 1000.0] {
                let scaled: Vec<(String, f64)> = scored.iter().map(|(id, s)| (id.clone(), s * c)).collect();
                ensure!(select_top_fraction(&scaled, p).unwrap() == got, "N={n}: top fraction not scale invariant");
            }
        }
    }
    Ok("sizes max(1, ⌈p·N⌉) for N ∈ {1, 7, 10, 50, 200}; tie-breaks and rescaling invariance hold".into())
}

// ------------------------------------------------------------ pipeline runs

fn bin(name: &str) -> PathBuf {
    match name {
        "paraseg" => PathBuf::from(env!("CARGO_BIN_EXE_paraseg")),
        "phantom-segmenter" => PathBuf::from(env!("CARGO_BIN_EXE_phantom-segmenter")),
        "phantom-features" => PathBuf::from(env!("CARGO_BIN_EXE_phantom-features")),
        "memorizing-trainer" => PathBuf::from(env!("CARGO_BIN_EXE_memorizing-trainer")),
        other => panic!("unknown binary {other}"),
    }
}

/// Generate a phantom dataset through the CLI and write a run config that
/// drives the synthetic backends.
fn phantom_setup(dir: &Path, spec: &PhantomSpec, stats: StatsOptions) -> Result<PathBuf, String> {
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, serde_json::to_string(spec).unwrap()).map_err(|e| e.to_string())?;
    let data = dir.join("data");
    let mut cmd = Command::new(bin("paraseg"));
    cmd.arg("phantom").arg("--spec").arg(&spec_path).arg("--out").arg(&data);
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("phantom generation failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let mut segment = BackendDescriptor::new("phantom-segmenter", bin("phantom-segmenter"), BackendKind::Segment);
    segment.env.insert("PHANTOM_SIGMA".into(), spec.sigma.to_string());
    let backends = BackendSet {
        segment,
        features: BackendDescriptor::new("phantom-features", bin("phantom-features"), BackendKind::Features),
        train: BackendDescriptor::new("memorizing-trainer", bin("memorizing-trainer"), BackendKind::TrainPredict),
    };
    let mut cfg = RunConfig::new(vec![data.join("manifest.json")], backends, dir.join("run"));
    cfg.seed = spec.seed;
    cfg.stats = stats;
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).map_err(|e| e.to_string())?;
    Ok(path)
}

fn run_pipeline(config: &Path, out: &Path, jobs: usize) -> Result<(), String> {
    let jobs = jobs.to_string();
    let mut cmd = Command::new(bin("paraseg"));
    cmd.args(["pipeline", "run", "--jobs", &jobs, "--config"]).arg(config).arg("--out").arg(out);
    let o = cmd.output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("pipeline exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn side_dice(a: &[u8], b: &[u8]) -> f64 {
    let d = |c: u8| {
        let na = a.iter().filter(|&&v| v == c).count();
        let nb = b.iter().filter(|&&v| v == c).count();
        let both = a.iter().zip(b).filter(|(&x, &y)| x == c && y == c).count();
        if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 }
    };
    (d(1) + d(2)) / 2.0
}

/// Mean per-slice DSC of stage-1 pseudo-labels and final masks against
/// phantom truth, read straight from the artifact tree.
fn artifact_dsc(run: &Path, spec: &PhantomSpec) -> Result<(f64, f64), String> {
    let slice = spec.nx * spec.ny;
    let (mut s1, mut n1, mut fin, mut nf) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..spec.n_studies {
        let truth = phantom_study(spec, i).map_err(|e| e.to_string())?.labels;
        let id = spec.study_id(i);
        let pdir = run.join("stage1_pseudolabels").join(&spec.dataset_id).join(&id);
        let conf = fs::read_to_string(pdir.join("confidence.csv")).map_err(|e| format!("{}: {e}", pdir.display()))?;
        for line in conf.lines().skip(1).filter(|l| !l.is_empty()) {
            let z: usize = line.split(',').next().unwrap().parse().map_err(|_| "bad slice index".to_string())?;
            let m = fs::read(pdir.join(format!("slice_{z:03}.mask"))).map_err(|e| e.to_string())?;
            s1 += side_dice(&m, truth.slice(z));
            n1 += 1;
        }
        let f = fs::read(run.join("final_masks").join(&spec.dataset_id).join(format!("{id}.mask")))
            .map_err(|e| e.to_string())?;
        for z in spec.disc_indices().range() {
            fin += side_dice(&f[z * slice..(z + 1) * slice], truth.slice(z));
            nf += 1;
        }
    }
    ensure!(n1 > 0 && nf > 0, "no masks found under {}", run.display());
    Ok((s1 / n1 as f64, fin / nf as f64))
}

fn end_to_end(root: &Path) -> Outcome {
    let started = Instant::now();
    let (mut better, mut high) = (0, 0);
    let mut lines = Vec::new();
    for seed in 0..20 {
        let spec = PhantomSpec { sigma: 0.15, seed, ..Default::default() };
        let dir = root.join(format!("e2e_{seed}"));
        fs::create_dir_all(&dir).unwrap();
        let cfg = phantom_setup(&dir, &spec, StatsOptions::default())?;
        run_pipeline(&cfg, &dir.join("run"), 4)?;
        let (s1, fin) = artifact_dsc(&dir.join("run"), &spec)?;
        better += (fin >= s1) as usize;
        high += (fin >= 0.95) as usize;
        lines.push(format!("{seed}:{s1:.4}->{fin:.4}"));
    }
    let elapsed = started.elapsed();
    eprintln!("    per-seed stage-1 -> final DSC: {}", lines.join(" "));

    let spec = PhantomSpec { sigma: 0.0, seed: 7, ..Default::default() };
    let dir = root.join("e2e_zero");
    fs::create_dir_all(&dir).unwrap();
    let cfg = phantom_setup(&dir, &spec, StatsOptions::default())?;
    run_pipeline(&cfg, &dir.join("run"), 4)?;
    let (z1, zf) = artifact_dsc(&dir.join("run"), &spec)?;

    let summary = format!(
        "final ≥ stage-1 in {better}/20, final ≥ 0.95 in {high}/20, σ=0 DSC ({z1}, {zf}), 20 runs in {:.1}s",
        elapsed.as_secs_f64()
    );
    ensure!(better >= 18, "{summary}");
    ensure!(high >= 15, "{summary}");
    ensure!(z1 == 1.0 && zf == 1.0, "{summary}");
    ensure!(elapsed < Duration::from_secs(120), "{summary}");
    Ok(summary)
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Outcome {
    let spec = PhantomSpec { sigma: 0.15, seed: 3, phases: vec![], ..Default::default() };
    let dir = root.join("determinism");
    fs::create_dir_all(&dir).unwrap();
    let cfg = phantom_setup(&dir, &spec, StatsOptions::default())?;
    let (a, b) = (dir.join("a"), dir.join("b"));
    run_pipeline(&cfg, &a, 1)?;
    run_pipeline(&cfg, &b, 4)?;
    let reports: Vec<PathBuf> = ["quant", "stats"].iter().flat_map(|d| csv_files(&a.join(d)).into_iter().map(move |p| Path::new(d).join(p))).collect();
    ensure!(reports.len() >= 3, "only {} CSV reports produced", reports.len());
    let other: Vec<PathBuf> = ["quant", "stats"].iter().flat_map(|d| csv_files(&b.join(d)).into_iter().map(move |p| Path::new(d).join(p))).collect();
    ensure!(reports == other, "runs produced different report sets");
    for r in &reports {
        let (x, y) = (fs::read(a.join(r)).unwrap(), fs::read(b.join(r)).unwrap());
        ensure!(x == y, "{} differs between runs", r.display());
    }
    Ok(format!("{} CSV reports byte-identical across two runs (jobs 1 vs 4)", reports.len()))
}

fn report_fidelity(root: &Path) -> Outcome {
    let columns: Vec<&str> = STATS_HEADER.split(',').collect();
    for c in ["manual_mean", "manual_sd", "ai_mean", "ai_sd", "tost_min_delta_pct", "mae", "icc", "icc_ci_low", "icc_ci_high"] {
        ensure!(columns.contains(&c), "stats CSV lacks column {c}");
    }

    let spec = PhantomSpec {
        dataset_id: "agbresa".into(),
        modality: PhantomModality::Dixon,
        n_studies: 72,
        sigma: 0.1,
        seed: 9,
        phases: vec!["baseline".into(), "bedrest".into(), "recovery".into()],
        ..Default::default()
    };
    let dir = root.join("agbresa");
    fs::create_dir_all(&dir).unwrap();
    let cfg = phantom_setup(&dir, &spec, StatsOptions { resamples: 200, ..Default::default() })?;
    let run = dir.join("run");
    run_pipeline(&cfg, &run, 4)?;

    let stats = fs::read_to_string(run.join("stats/stats.csv")).map_err(|e| e.to_string())?;
    let mut lines = stats.lines();
    ensure!(lines.next() == Some(STATS_HEADER), "stats.csv header differs from the schema");
    let col = |name: &str| columns.iter().position(|c| *c == name).unwrap();
    let mut sides = BTreeSet::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == columns.len(), "row has {} fields: {line}", f.len());
        if f[col("metric")] != "fat_ratio" {
            continue;
        }
        ensure!(f[col("n")] == "72", "fat_ratio {} has n = {}", f[col("side")], f[col("n")]);
        ensure!(f[col("analysis")].starts_with("lmm"), "fat_ratio analysed as {}", f[col("analysis")]);
        for c in ["manual_mean", "manual_sd", "ai_mean", "ai_sd", "tost_min_delta_pct", "mae", "icc", "icc_ci_low", "icc_ci_high"] {
            ensure!(!f[col(c)].is_empty(), "fat_ratio {} has blank {c}", f[col("side")]);
        }
        sides.insert(f[col("side")].to_string());
    }
    ensure!(sides.len() == 2, "fat_ratio rows for sides {sides:?}");

    let quant = fs::read_to_string(run.join("quant/agbresa.csv")).map_err(|e| e.to_string())?;
    for side in ["left", "right"] {
        let n = quant
            .lines()
            .filter(|l| l.contains(&format!(",{side},")) && l.contains(",AI,") && l.split(',').nth(5).is_some_and(|v| !v.is_empty()))
            .count();
        ensure!(n == 72, "{n} AI fat-ratio measurements on the {side} side");
    }

    let table = fs::read_to_string(run.join("stats/table.txt")).map_err(|e| e.to_string())?;
    for row in ["Manual", "AI", "TOST Min. δ", "MAE", "ICC [95% CI]"] {
        ensure!(table.lines().any(|l| l.starts_with(row)), "table lacks row {row}");
    }
    ensure!(format_table(&[]).lines().count() <= 1, "empty table should have no data rows");
    let svgs = fs::read_dir(run.join("stats/ba")).map_err(|e| e.to_string())?.count();
    Ok(format!("schema columns present; 72 paired fat-ratio measurements per side (LMM); {svgs} Bland–Altman files"))
}

// --------------------------------------------------------------------- main

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("metric oracle equivalence", Box::new(metric_oracle)),
        ("quantification exactness", Box::new(quantification_exactness)),
        ("LMM correctness", Box::new(lmm_correctness)),
        ("TOST/Min-δ duality", Box::new(tost_duality)),
        ("ICC(2,1) oracle", Box::new(icc_oracle)),
        ("model-based Bland–Altman", Box::new(bland_altman_reduction)),
        ("selection arithmetic", Box::new(selection_arithmetic)),
        ("end-to-end cascade on phantoms", Box::new({
            let r = root.clone();
            move || end_to_end(&r)
        })),
        ("determinism", Box::new({
            let r = root.clone();
            move || determinism(&r)
        })),
        ("report fidelity", Box::new({
            let r = root.clone();
            move || report_fidelity(&r)
        })),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
