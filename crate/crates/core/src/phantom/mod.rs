//! Synthetic datasets and stand-in backends.
//!
//! A phantom study is a stack of axial slices holding two ellipses (left and
//! right muscle) that drift and grow slowly from head to foot. Tissue values
//! are piecewise constant, so volumes, fat ratios and mean attenuation have
//! closed forms when no noise is added.

mod segmenter;
mod trainer;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::volume::{
    write_manifest, ClipMode, DatasetManifest, DiscIndices, DixonPair, PreprocessProfile, StudyManifest,
};
use crate::volume::{write_mask_slices, write_slices_i16};
use crate::volume::{Dims, LabelVolume, Modality, ScalarVolume, VolumeError, VoxelSpacing};

pub use segmenter::{perturb_mask, perturbation_level, run_segment, segment_plan, SegmenterParams};
pub use trainer::{
    features_for_manifest, majority_vote, run_features, run_predict, run_train, slice_features, MemorizingBackend,
    MemorizingModel,
};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    SpecInvalid(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Format(String),
}

impl PhantomError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        PhantomError::Io { path: path.to_path_buf(), message: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, PhantomError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomModality {
    #[default]
    Ct,
    Dixon,
}

/// One muscle cross-section. Pixel `(x, y)` on slice `z` is inside when
/// `((x - cx(z)) / rx(z))^2 + ((y - cy(z)) / ry(z))^2 <= 1`, with the centre
/// moving by `drift_*` pixels per slice and both radii scaled by
/// `1 + growth * z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipseSpec {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    #[serde(default)]
    pub drift_x: f64,
    #[serde(default)]
    pub drift_y: f64,
    #[serde(default)]
    pub growth: f64,
}

impl EllipseSpec {
    pub fn at(&self, z: usize) -> (f64, f64, f64, f64) {
        let z = z as f64;
        let s = 1.0 + self.growth * z;
        (self.cx + self.drift_x * z, self.cy + self.drift_y * z, self.rx * s, self.ry * s)
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let (cx, cy, rx, ry) = self.at(z);
        let u = (x as f64 - cx) / rx;
        let v = (y as f64 - cy) / ry;
        u * u + v * v <= 1.0
    }

    /// Bounding box `[xmin, xmax, ymin, ymax]` on slice `z`.
    fn extent(&self, z: usize) -> [f64; 4] {
        let (cx, cy, rx, ry) = self.at(z);
        [cx - rx, cx + rx, cy - ry, cy + ry]
    }
}

/// Intensity model. CT values are Hounsfield units; Dixon values are
/// arbitrary signal units on the water and fat images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueSpec {
    pub muscle_hu: f64,
    pub background_hu: f64,
    pub muscle_water: f64,
    pub muscle_fat: f64,
    pub background_water: f64,
    pub background_fat: f64,
    /// Half-width of the uniform per-study offset on muscle values; the
    /// offset is rounded so images stay integral.
    pub jitter: f64,
    /// Noise standard deviation per unit of `sigma`.
    pub noise_scale: f64,
}

impl Default for TissueSpec {
    fn default() -> Self {
        Self {
            muscle_hu: 45.0,
            background_hu: -50.0,
            muscle_water: 90.0,
            muscle_fat: 30.0,
            background_water: 20.0,
            background_fat: 200.0,
            jitter: 10.0,
            noise_scale: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dataset_id: String,
    pub modality: PhantomModality,
    pub n_studies: usize,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// In-plane spacing and nominal slice thickness (mm).
    pub spacing: [f64; 3],
    /// Relative half-width of the per-study uniform jitter on slice thickness.
    pub dz_jitter: f64,
    pub left: EllipseSpec,
    pub right: EllipseSpec,
    pub tissue: TissueSpec,
    /// Perturbation level for images and the synthetic segmenter, in [0, 0.5).
    pub sigma: f64,
    pub seed: u64,
    /// Acquisition phases per subject. When non-empty, consecutive studies
    /// are grouped into subjects, one study per phase.
    pub phases: Vec<String>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dataset_id: "phantom".into(),
            modality: PhantomModality::Ct,
            n_studies: 10,
            nx: 64,
            ny: 64,
            nz: 20,
            spacing: [0.8, 0.8, 5.0],
            dz_jitter: 0.1,
            left: EllipseSpec { cx: 19.0, cy: 30.0, rx: 8.0, ry: 10.0, drift_x: -0.05, drift_y: 0.15, growth: 0.004 },
            right: EllipseSpec { cx: 44.0, cy: 30.0, rx: 8.0, ry: 10.0, drift_x: 0.05, drift_y: 0.15, growth: 0.004 },
            tissue: TissueSpec::default(),
            sigma: 0.0,
            seed: 0,
            phases: Vec::new(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PhantomError::SpecInvalid(m));
        if self.dataset_id.trim().is_empty() {
            return bad("dataset_id is empty".into());
        }
        if self.n_studies == 0 {
            return bad("n_studies must be positive".into());
        }
        if self.nx < 4 || self.ny < 4 || self.nz < 3 {
            return bad(format!("dims {}x{}x{} too small", self.nx, self.ny, self.nz));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("spacing must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dz_jitter) {
            return bad(format!("dz_jitter {} outside [0, 1)", self.dz_jitter));
        }
        if !(self.sigma.is_finite() && (0.0..0.5).contains(&self.sigma)) {
            return bad(format!("sigma {} outside [0, 0.5)", self.sigma));
        }
        if !self.phases.is_empty() && self.n_studies % self.phases.len() != 0 {
            return bad(format!("{} studies do not split into {} phases", self.n_studies, self.phases.len()));
        }
        for (name, e) in [("left", &self.left), ("right", &self.right)] {
            if !(e.rx > 0.0 && e.ry > 0.0) {
                return bad(format!("{name} radii must be positive"));
            }
            for z in 0..self.nz {
                let s = 1.0 + e.growth * z as f64;
                let [x0, x1, y0, y1] = e.extent(z);
                if s <= 0.0 || x0 < 1.0 || y0 < 1.0 || x1 > (self.nx - 2) as f64 || y1 > (self.ny - 2) as f64 {
                    return bad(format!("{name} ellipse leaves the frame on slice {z}"));
                }
            }
        }
        for z in 0..self.nz {
            let l = self.left.extent(z);
            let r = self.right.extent(z);
            if l[1] + 2.0 >= r[0] {
                return bad(format!("ellipses touch on slice {z}"));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims { nx: self.nx, ny: self.ny, nz: self.nz }
    }

    pub fn disc_indices(&self) -> DiscIndices {
        DiscIndices { l3l4: 0, l4l5: self.nz / 2, l5s1: self.nz - 1 }
    }

    pub fn study_id(&self, i: usize) -> String {
        format!("s{i:03}")
    }

    fn subject_and_phase(&self, i: usize) -> (Option<String>, Option<String>) {
        if self.phases.is_empty() {
            return (None, None);
        }
        let p = self.phases.len();
        (Some(format!("sub{:03}", i / p)), Some(self.phases[i % p].clone()))
    }

    /// Ground-truth labels, identical for every study.
    pub fn truth_labels(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.nx * self.ny * self.nz];
        for z in 0..self.nz {
            for y in 0..self.ny {
                for x in 0..self.nx {
                    let i = z * self.nx * self.ny + y * self.nx + x;
                    if self.left.contains(x, y, z) {
                        out[i] = 1;
                    } else if self.right.contains(x, y, z) {
                        out[i] = 2;
                    }
                }
            }
        }
        out
    }
}

/// Closed-form per-study values for quantification checks (only exact when
/// `sigma == 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub study_id: String,
    pub subject_id: Option<String>,
    pub phase: Option<String>,
    pub spacing: VoxelSpacing,
    /// Voxel counts inside the analysed range, `[left, right]`.
    pub voxels: [usize; 2],
    pub volume_ml: [f64; 2],
    pub mean_hu: Option<f64>,
    pub fat_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PhantomStudy {
    pub truth: PhantomTruth,
    pub image: ScalarVolume,
    pub fat: Option<ScalarVolume>,
    pub labels: LabelVolume,
}

fn study_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Build one study in memory.
pub fn phantom_study(spec: &PhantomSpec, i: usize) -> Result<PhantomStudy> {
    spec.validate()?;
    let mut rng = study_rng(spec.seed, i);
    let dz = spec.spacing[2] * (1.0 + spec.dz_jitter * rng.random_range(-1.0..=1.0));
    let spacing = VoxelSpacing::new(spec.spacing[0], spec.spacing[1], dz)?;
    let dims = spec.dims();
    let t = &spec.tissue;
    let offset = (t.jitter * rng.random_range(-1.0..=1.0)).round();
    let noise = Normal::new(0.0, spec.sigma * t.noise_scale).expect("finite sd");
    let labels = spec.truth_labels();
    let noisy = |v: f64, rng: &mut ChaCha8Rng| {
        if spec.sigma > 0.0 {
            (v + noise.sample(rng)).round()
        } else {
            v
        }
    };

    let (modality, image, fat, mean_hu, fat_ratio) = match spec.modality {
        PhantomModality::Ct => {
            let muscle = t.muscle_hu + offset;
            let data: Vec<f64> = labels
                .iter()
                .map(|&l| noisy(if l > 0 { muscle } else { t.background_hu }, &mut rng).clamp(-1024.0, 3071.0))
                .collect();
            (Modality::Ct, data, None, Some(muscle), None)
        }
        PhantomModality::Dixon => {
            let fat_muscle = (t.muscle_fat + offset).max(0.0);
            let mut water = Vec::with_capacity(labels.len());
            let mut fat = Vec::with_capacity(labels.len());
            for &l in &labels {
                let (w, f) =
                    if l > 0 { (t.muscle_water, fat_muscle) } else { (t.background_water, t.background_fat) };
                water.push(noisy(w, &mut rng).max(0.0));
                fat.push(noisy(f, &mut rng).max(0.0));
            }
            let ratio = fat_muscle / (fat_muscle + t.muscle_water);
            (Modality::MriDixonWater, water, Some(fat), None, Some(ratio))
        }
    };
    let voxels = [1u8, 2].map(|c| labels.iter().filter(|&&l| l == c).count());
    let voxel_ml = spacing.voxel_volume_mm3() / 1000.0;
    let (subject_id, phase) = spec.subject_and_phase(i);
    Ok(PhantomStudy {
        truth: PhantomTruth {
            study_id: spec.study_id(i),
            subject_id,
            phase,
            spacing,
            voxels,
            volume_ml: voxels.map(|v| v as f64 * voxel_ml),
            mean_hu,
            fat_ratio,
        },
        image: ScalarVolume::new(dims, spacing, modality, image)?,
        fat: fat.map(|f| ScalarVolume::new(dims, spacing, Modality::MriDixonFat, f)).transpose()?,
        labels: LabelVolume::new(dims, spacing, labels)?,
    })
}

pub fn truth_path(dir: &Path) -> PathBuf {
    dir.join("truth.json")
}

/// Write a complete dataset directory: `manifest.json`, `truth.json` and one
/// sub-directory per study with image, fat and manual mask slices.
pub fn generate_phantom_dataset(spec: &PhantomSpec, dir: &Path) -> Result<(DatasetManifest, Vec<PhantomTruth>)> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| PhantomError::io(dir, e))?;
    let mut studies = Vec::with_capacity(spec.n_studies);
    let mut truths = Vec::with_capacity(spec.n_studies);
    for i in 0..spec.n_studies {
        let study = phantom_study(spec, i)?;
        let id = study.truth.study_id.clone();
        let sdir = dir.join(&id);
        let slices = write_slices_i16(&study.image, &sdir, "img")?;
        let dixon_pair = study
            .fat
            .as_ref()
            .map(|f| write_slices_i16(f, &sdir, "fat").map(|fat_slices| DixonPair { fat_slices }))
            .transpose()?;
        let manual = write_mask_slices(&study.labels, &sdir, "mask")?;
        studies.push(StudyManifest {
            study_id: id,
            modality: study.image.modality(),
            spacing: study.truth.spacing,
            dims: spec.dims(),
            slices,
            disc_indices: spec.disc_indices(),
            dixon_pair,
            manual_masks: Some(manual),
            subject_id: study.truth.subject_id.clone(),
            phase: study.truth.phase.clone(),
        });
        truths.push(study.truth);
    }
    let manifest = DatasetManifest {
        dataset_id: spec.dataset_id.clone(),
        modality: studies[0].modality,
        preprocessing: PreprocessProfile {
            clip: ClipMode::Auto,
            downsample: 1,
            target_size: spec.nx.max(spec.ny),
            ..PreprocessProfile::default()
        },
        studies,
    };
    write_manifest(&manifest, &dir.join("manifest.json"))?;
    let text = serde_json::to_string_pretty(&truths).expect("truth serializes");
    let path = truth_path(dir);
    fs::write(&path, text + "\n").map_err(|e| PhantomError::io(&path, e))?;
    Ok((manifest, truths))
}

pub fn read_truth(dir: &Path) -> Result<Vec<PhantomTruth>> {
    let path = truth_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| PhantomError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| PhantomError::Format(format!("{}: {e}", path.display())))
}
