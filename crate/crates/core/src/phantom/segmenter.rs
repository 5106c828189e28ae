//! Stand-in segmentation backend: emits ground-truth masks with seeded
//! boundary erosion and dilation that grows with the frame's position in
//! the plan.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{PhantomError, Result};
use crate::backend::wire::{confidence_path, frame_mask_path, write_confidence_csv, PlanFile, PlanFrame};
use crate::mask::mean_side_iou;
use crate::volume::load_manifest;
use crate::volume::{read_mask_slice, write_mask_slice};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmenterParams {
    pub sigma: f64,
    pub seed: u64,
}

/// Fraction of each boundary ring flipped at plan position `k` of `len`.
pub fn perturbation_level(sigma: f64, k: usize, len: usize) -> f64 {
    if len == 0 {
        return 0.0;
    }
    (4.0 * sigma * (k + 1) as f64 / len as f64).clamp(0.0, 1.0)
}

fn frame_rng(seed: u64, frame: &PlanFrame, k: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(frame.study_id.as_bytes());
    h.update([0]);
    h.update((frame.slice_index as u64).to_le_bytes());
    h.update((k as u64).to_le_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().unwrap()))
}

/// Erode each pixel of a class's inner ring and dilate into each background
/// pixel of its outer ring, independently with probability `p / 2`. Rings
/// use 4-connectivity and are taken from `truth`, so the two operations do
/// not compound.
pub fn perturb_mask(truth: &[u8], nx: usize, ny: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    assert_eq!(truth.len(), nx * ny, "mask size");
    let mut out = truth.to_vec();
    if p <= 0.0 {
        return out;
    }
    let at = |x: isize, y: isize| -> Option<u8> {
        (x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny).then(|| truth[y as usize * nx + x as usize])
    };
    for class in [1u8, 2] {
        let mut inner = Vec::new();
        let mut outer = Vec::new();
        for y in 0..ny {
            for x in 0..nx {
                let v = truth[y * nx + x];
                let nb = [(-1, 0), (1, 0), (0, -1), (0, 1)].map(|(dx, dy)| at(x as isize + dx, y as isize + dy));
                if v == class && nb.iter().any(|n| *n != Some(class)) {
                    inner.push(y * nx + x);
                } else if v == 0 && nb.contains(&Some(class)) {
                    outer.push(y * nx + x);
                }
            }
        }
        for &i in &inner {
            if rng.random_bool(p / 2.0) {
                out[i] = 0;
            }
        }
        for &i in &outer {
            if rng.random_bool(p / 2.0) && out[i] == 0 {
                out[i] = class;
            }
        }
    }
    out
}

/// Perturbed masks and their IoU against truth, one per plan frame.
pub fn segment_plan(
    plan: &PlanFile,
    mut truth: impl FnMut(&PlanFrame) -> Result<Vec<u8>>,
    params: SegmenterParams,
) -> Result<Vec<(Vec<u8>, f64)>> {
    let len = plan.frames.len();
    plan.frames
        .iter()
        .enumerate()
        .map(|(k, frame)| {
            let t = truth(frame)?;
            if t.len() != frame.nx * frame.ny {
                return Err(PhantomError::Format(format!(
                    "truth for {}:{} has {} pixels, frame is {}x{}",
                    frame.study_id,
                    frame.slice_index,
                    t.len(),
                    frame.nx,
                    frame.ny
                )));
            }
            let mut rng = frame_rng(params.seed, frame, k);
            let m = perturb_mask(&t, frame.nx, frame.ny, perturbation_level(params.sigma, k, len), &mut rng);
            let conf = mean_side_iou(&m, &t).map_err(|e| PhantomError::Format(e.to_string()))?;
            Ok((m, conf))
        })
        .collect()
}

/// Process entry point for `segment --plan --prompt --out`. Truth comes from
/// the manual masks of the manifest the plan points at.
pub fn run_segment(plan_path: &Path, prompt_path: &Path, out_dir: &Path, params: SegmenterParams) -> Result<()> {
    let plan = PlanFile::read(plan_path)?;
    let seed_frame = plan
        .frames
        .iter()
        .find(|f| f.study_id == plan.seed.study_id && f.slice_index == plan.seed.slice_index)
        .ok_or_else(|| PhantomError::Format("seed frame not in plan".into()))?;
    let prompt = std::fs::read(prompt_path).map_err(|e| PhantomError::io(prompt_path, e))?;
    if prompt.len() != seed_frame.nx * seed_frame.ny {
        return Err(PhantomError::Format(format!(
            "prompt has {} pixels, seed frame is {}x{}",
            prompt.len(),
            seed_frame.nx,
            seed_frame.ny
        )));
    }
    let manifest = load_manifest(&plan.manifest)?;
    let mut cache: BTreeMap<(String, usize), Vec<u8>> = BTreeMap::new();
    let results = segment_plan(
        &plan,
        |f| {
            let key = (f.study_id.clone(), f.slice_index);
            if let Some(m) = cache.get(&key) {
                return Ok(m.clone());
            }
            let study = manifest
                .study(&f.study_id)
                .ok_or_else(|| PhantomError::Format(format!("study {} not in manifest", f.study_id)))?;
            let path = study
                .manual_masks
                .as_ref()
                .and_then(|m| m.get(f.slice_index))
                .ok_or_else(|| PhantomError::Format(format!("no truth mask for {}:{}", f.study_id, f.slice_index)))?;
            let m = read_mask_slice(path, f.nx, f.ny)?;
            cache.insert(key, m.clone());
            Ok(m)
        },
        params,
    )?;
    std::fs::create_dir_all(out_dir).map_err(|e| PhantomError::io(out_dir, e))?;
    for (k, (m, _)) in results.iter().enumerate() {
        write_mask_slice(&frame_mask_path(out_dir, k), m)?;
    }
    let conf: Vec<f64> = results.iter().map(|(_, c)| *c).collect();
    write_confidence_csv(&confidence_path(out_dir), &conf)?;
    Ok(())
}
