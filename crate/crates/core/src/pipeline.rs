//! End-to-end orchestration over persisted artifacts.
//!
//! Every stage reads its inputs from the run directory and writes its outputs
//! back there, so any stage can be re-run on its own. A stage whose inputs
//! hash to the value recorded by its previous run is skipped unless forced.
//!
//! ```text
//! <out>/standardized/<dataset>/   clipped, resized slices + manifest.json
//! <out>/features/<dataset>/       features.csv
//! <out>/plans/<dataset>/<study>/  plan.json, prompt.mask
//! <out>/stage1_pseudolabels/<dataset>/<study>/  masks, confidence.csv, backend/
//! <out>/selection_reports/        step1.json .. step3.json
//! <out>/models/                   step1.model .. step3.model, pairs, predictions
//! <out>/final_masks/<dataset>/    <study>.mask
//! <out>/quant/                    <dataset>.csv
//! <out>/stats/                    stats.csv, table.txt, dsc.csv, ba/
//! <out>/logs/pipeline.log
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::wire::PlanFile;
use crate::backend::{
    invoke_features, invoke_predict, invoke_segmentation, invoke_training, BackendDescriptor, BackendError,
    BackendKind, ModelHandle, ScoredMask, TrainingJob, TrainingPair,
};
use crate::mask::{dice, Side, SliceMask};
use crate::plan::{build_interleaved_plan, demux_frames, select_reference_volume, DistanceMetric, FrameRole, PlanStudy, PropagationPlan};
use crate::quant::{quantify_dataset, QuantInput, QuantTable};
use crate::report::{
    bland_altman_csv, bland_altman_svg, compute_stats, dsc_csv, dsc_row, format_table, stats_csv, DscRow, StatsOptions,
    StudyDesign,
};
use crate::selection::{
    run_cascade, select_stage1, CascadeBackend, CascadeDataset, CascadeStudy, PseudoLabel, SelectionConfig,
    SelectionReport, TrainingExample,
};
use crate::stats::Phase;
use crate::volume::{
    clip_intensity, load_manifest, load_study, read_label_volume, read_mask_slice, resize_labels_nearest,
    standardize_labels, standardize_slices, write_label_volume, write_manifest, write_mask_slice, write_mask_slices,
    write_slices_i16, ClipMode, DatasetManifest, LabelVolume, PreprocessProfile, Rounding, StandardizeOptions,
    StudyManifest, VolumeError,
};

/// Environment variable carrying the run seed to every backend process.
pub const SEED_ENV: &str = "PARASEG_SEED";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Backend(_) => 3,
            PipelineError::Internal(_) => 4,
        }
    }
}

impl From<BackendError> for PipelineError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::MissingExecutable { .. }
            | BackendError::WrongKind { .. }
            | BackendError::Crashed { .. }
            | BackendError::Timeout { .. }
            | BackendError::ProtocolViolation(_) => PipelineError::Backend(e.to_string()),
            other => PipelineError::Internal(other.to_string()),
        }
    }
}

fn internal(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Internal(e.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Internal(format!("{}: {e}", path.display()))
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSet {
    pub segment: BackendDescriptor,
    pub features: BackendDescriptor,
    pub train: BackendDescriptor,
}

impl BackendSet {
    fn all(&self) -> [(&BackendDescriptor, BackendKind); 3] {
        [
            (&self.segment, BackendKind::Segment),
            (&self.features, BackendKind::Features),
            (&self.train, BackendKind::TrainPredict),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Svg,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

fn default_jobs() -> usize {
    4
}

fn default_reports() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv, ReportFormat::Svg]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest paths.
    pub datasets: Vec<PathBuf>,
    pub backends: BackendSet,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub stats: StatsOptions,
    #[serde(default)]
    pub distance_metric: DistanceMetric,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_reports")]
    pub reports: Vec<ReportFormat>,
}

fn absolutize(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn new(datasets: Vec<PathBuf>, backends: BackendSet, out: PathBuf) -> Self {
        Self {
            datasets,
            backends,
            selection: SelectionConfig::default(),
            stats: StatsOptions::default(),
            distance_metric: DistanceMetric::default(),
            out,
            seed: 0,
            jobs: default_jobs(),
            reports: default_reports(),
        }
    }

    /// Parse a JSON config. Relative dataset, output and backend paths are
    /// taken relative to the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        cfg.datasets = cfg.datasets.iter().map(|d| absolutize(&base, d)).collect();
        cfg.out = absolutize(&base, &cfg.out);
        for d in [&mut cfg.backends.segment, &mut cfg.backends.features, &mut cfg.backends.train] {
            if d.executable.components().count() > 1 {
                d.executable = absolutize(&base, &d.executable);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(PipelineError::Config("no datasets listed".into()));
        }
        if let Some(d) = self.datasets.iter().find(|d| !d.is_file()) {
            return Err(PipelineError::Config(format!("dataset manifest {} not found", d.display())));
        }
        if self.jobs == 0 {
            return Err(PipelineError::Config("jobs must be at least 1".into()));
        }
        self.selection.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        for (d, kind) in self.backends.all() {
            d.expect_kind(kind)?;
            d.validate()?;
        }
        fs::create_dir_all(&self.out)
            .map_err(|e| PipelineError::Config(format!("output directory {}: {e}", self.out.display())))?;
        Ok(())
    }

    fn descriptor(&self, d: &BackendDescriptor) -> BackendDescriptor {
        let mut d = d.clone();
        d.env.insert(SEED_ENV.into(), self.seed.to_string());
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    Plan,
    Segment,
    Select,
    Train,
    Quantify,
    Stats,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Prepare,
        Stage::Plan,
        Stage::Segment,
        Stage::Select,
        Stage::Train,
        Stage::Quantify,
        Stage::Stats,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Plan => "plan",
            Stage::Segment => "segment",
            Stage::Select => "select",
            Stage::Train => "train",
            Stage::Quantify => "quantify",
            Stage::Stats => "stats",
            Stage::Report => "report",
        }
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn standardized(&self, ds: &str) -> PathBuf {
        self.root.join("standardized").join(ds)
    }

    pub fn standardized_manifest(&self, ds: &str) -> PathBuf {
        self.standardized(ds).join("manifest.json")
    }

    pub fn features(&self, ds: &str) -> PathBuf {
        self.root.join("features").join(ds)
    }

    pub fn plans(&self, ds: &str) -> PathBuf {
        self.root.join("plans").join(ds)
    }

    pub fn pseudo(&self, ds: &str) -> PathBuf {
        self.root.join("stage1_pseudolabels").join(ds)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("selection_reports")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn final_masks(&self, ds: &str) -> PathBuf {
        self.root.join("final_masks").join(ds)
    }

    pub fn quant(&self) -> PathBuf {
        self.root.join("quant")
    }

    pub fn stats(&self) -> PathBuf {
        self.root.join("stats")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    fn stamp(&self, stage: Stage) -> PathBuf {
        self.root.join(".stamps").join(format!("{}.sha256", stage.as_str()))
    }

    fn stage_outputs(&self, stage: Stage) -> Vec<PathBuf> {
        let r = &self.root;
        match stage {
            Stage::Prepare => vec![r.join("standardized")],
            Stage::Plan => vec![r.join("features"), r.join("plans")],
            Stage::Segment => vec![r.join("stage1_pseudolabels")],
            Stage::Select => vec![self.reports().join("step1.json")],
            Stage::Train => vec![self.models(), r.join("final_masks")],
            Stage::Quantify => vec![self.quant()],
            Stage::Stats => vec![self.stats().join("stats.csv")],
            Stage::Report => vec![self.stats().join("ba")],
        }
    }

    fn stage_inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let r = &self.root;
        match stage {
            Stage::Prepare => vec![],
            Stage::Plan => vec![r.join("standardized")],
            Stage::Segment => vec![r.join("standardized"), r.join("plans")],
            Stage::Select => vec![r.join("stage1_pseudolabels")],
            Stage::Train => vec![r.join("standardized"), r.join("stage1_pseudolabels")],
            Stage::Quantify => vec![r.join("final_masks")],
            Stage::Stats => vec![self.quant(), r.join("final_masks"), r.join("stage1_pseudolabels"), r.join("standardized")],
            Stage::Report => vec![self.quant()],
        }
    }
}

fn hash_path(h: &mut Sha256, root: &Path, path: &Path) -> Result<()> {
    let rel = path.strip_prefix(root).unwrap_or(path);
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| io_err(path, e))?;
        entries.sort();
        for e in entries {
            hash_path(h, root, &e)?;
        }
    } else if path.is_file() {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(path).map_err(|e| io_err(path, e))?);
        h.update([0]);
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn stage_hash(cfg: &RunConfig, layout: &Layout, stage: Stage) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    h.update(stage.as_str().as_bytes());
    if stage == Stage::Prepare || stage == Stage::Quantify || stage == Stage::Stats {
        // original datasets feed these stages directly
        for d in &cfg.datasets {
            let m = load_manifest(d).map_err(|e| PipelineError::Config(format!("{}: {e}", d.display())))?;
            hash_path(&mut h, Path::new("/"), d)?;
            for s in &m.studies {
                for f in s.referenced_files() {
                    hash_path(&mut h, Path::new("/"), f)?;
                }
            }
        }
    }
    for p in layout.stage_inputs(stage) {
        hash_path(&mut h, &layout.root, &p)?;
    }
    Ok(hex(&h.finalize()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn append_log(layout: &Layout, line: &str) -> Result<()> {
    use std::io::Write as _;
    let path = layout.logs().join("pipeline.log");
    fs::create_dir_all(layout.logs()).map_err(|e| io_err(&path, e))?;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io_err(&path, e))?;
    writeln!(f, "{line}").map_err(|e| io_err(&path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

/// Run one stage, skipping it when its inputs are unchanged since the last
/// successful run and `force` is off.
pub fn run_stage(cfg: &RunConfig, stage: Stage, force: bool) -> Result<StageOutcome> {
    let layout = Layout::new(&cfg.out);
    let hash = stage_hash(cfg, &layout, stage)?;
    let stamp = layout.stamp(stage);
    let outputs_present = layout.stage_outputs(stage).iter().all(|p| p.exists());
    if !force && outputs_present && fs::read_to_string(&stamp).map(|s| s.trim() == hash).unwrap_or(false) {
        log::info!("{}: up to date", stage.as_str());
        append_log(&layout, &format!("{}: up to date", stage.as_str()))?;
        return Ok(StageOutcome::UpToDate);
    }
    let _ = fs::remove_file(&stamp);
    let summary = match stage {
        Stage::Prepare => prepare(cfg, &layout)?,
        Stage::Plan => plan(cfg, &layout)?,
        Stage::Segment => segment(cfg, &layout)?,
        Stage::Select => select(cfg, &layout)?,
        Stage::Train => train(cfg, &layout)?,
        Stage::Quantify => quantify(cfg, &layout)?,
        Stage::Stats => stats(cfg, &layout)?,
        Stage::Report => report(cfg, &layout)?,
    };
    log::info!("{}: {summary}", stage.as_str());
    append_log(&layout, &format!("{}: {summary}", stage.as_str()))?;
    // the stamp covers the inputs as they were when the stage started
    write_file(&stamp, hash + "\n")?;
    Ok(StageOutcome::Ran)
}

/// Validate the configuration and run every stage in order on a thread pool
/// of `cfg.jobs` workers.
pub fn run_pipeline(cfg: &RunConfig, force: bool) -> Result<Vec<(Stage, StageOutcome)>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build().map_err(internal)?;
    pool.install(|| {
        let mut out = Vec::new();
        let mut force = force;
        for stage in Stage::ALL {
            let outcome = run_stage(cfg, stage, force)?;
            // everything downstream of a re-run stage runs again
            force |= outcome == StageOutcome::Ran;
            out.push((stage, outcome));
        }
        Ok(out)
    })
}

/// Load every configured dataset manifest.
pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<(PathBuf, DatasetManifest)>> {
    let mut seen = BTreeMap::new();
    cfg.datasets
        .iter()
        .map(|p| {
            let m = load_manifest(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            if let Some(prev) = seen.insert(m.dataset_id.clone(), p.clone()) {
                return Err(PipelineError::Config(format!(
                    "dataset id {} used by {} and {}",
                    m.dataset_id,
                    prev.display(),
                    p.display()
                )));
            }
            Ok((p.clone(), m))
        })
        .collect()
}

fn load_standardized(layout: &Layout, ds: &str) -> Result<DatasetManifest> {
    let p = layout.standardized_manifest(ds);
    load_manifest(&p).map_err(|e| PipelineError::Internal(format!("{}: {e} (run the prepare stage)", p.display())))
}

fn standardize_study(
    dataset: &DatasetManifest,
    study: &StudyManifest,
    dir: &Path,
) -> std::result::Result<StudyManifest, VolumeError> {
    let p = dataset.preprocessing;
    let data = load_study(dataset, study)?;
    let clipped = match p.clip {
        ClipMode::Auto => clip_intensity(&data.image)?,
        ClipMode::None => data.image.clone(),
    };
    let opts = StandardizeOptions { target_size: p.target_size, scope: p.rescale, rounding: p.rounding };
    let img = standardize_slices(&clipped, opts)?;
    let sdir = dir.join(&study.study_id);
    let slices = write_slices_i16(&img, &sdir, "img")?;
    let manual_masks = data
        .manual
        .as_ref()
        .map(|m| standardize_labels(m, p.target_size).and_then(|m| write_mask_slices(&m, &sdir, "mask")))
        .transpose()?;
    Ok(StudyManifest {
        study_id: study.study_id.clone(),
        modality: img.modality(),
        spacing: img.spacing(),
        dims: img.dims(),
        slices,
        disc_indices: data.disc,
        dixon_pair: None,
        manual_masks,
        subject_id: study.subject_id.clone(),
        phase: study.phase.clone(),
    })
}

fn prepare(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let datasets = load_datasets(cfg)?;
    fresh_dir(&layout.root.join("standardized"))?;
    let mut n = 0;
    for (_, m) in &datasets {
        if m.preprocessing.rounding == Rounding::Float {
            return Err(PipelineError::Config(format!(
                "dataset {}: float rounding cannot be stored as 16-bit slices",
                m.dataset_id
            )));
        }
        if m.studies.len() < 2 {
            return Err(PipelineError::Config(format!("dataset {} needs at least two studies", m.dataset_id)));
        }
        let dir = layout.standardized(&m.dataset_id);
        let studies = m
            .studies
            .par_iter()
            .map(|s| standardize_study(m, s, &dir).map_err(|e| internal(format!("{} {}: {e}", m.dataset_id, s.study_id))))
            .collect::<Result<Vec<_>>>()?;
        n += studies.len();
        let out = DatasetManifest {
            dataset_id: m.dataset_id.clone(),
            modality: m.modality,
            preprocessing: PreprocessProfile { clip: ClipMode::None, downsample: 1, ..m.preprocessing },
            studies,
        };
        write_manifest(&out, &layout.standardized_manifest(&m.dataset_id)).map_err(internal)?;
    }
    Ok(format!("{} dataset(s), {n} studies standardized", datasets.len()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ReferenceChoice {
    reference: String,
    inference: Vec<String>,
}

fn plan(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let datasets = load_datasets(cfg)?;
    fresh_dir(&layout.root.join("plans"))?;
    fresh_dir(&layout.root.join("features"))?;
    let desc = cfg.descriptor(&cfg.backends.features);
    let mut n_plans = 0;
    for (_, m) in &datasets {
        let ds = &m.dataset_id;
        let std = load_standardized(layout, ds)?;
        let ids: Vec<String> = std.studies.iter().map(|s| s.study_id.clone()).collect();
        let features = invoke_features(&desc, &layout.standardized_manifest(ds), &ids, &layout.features(ds))?;
        let reference = select_reference_volume(&features, cfg.distance_metric).map_err(internal)?;
        let rs = std.study(&reference).expect("reference is a listed study");
        let top = rs.disc_indices.l3l4;
        let seed_path = rs.manual_masks.as_ref().and_then(|m| m.get(top)).ok_or_else(|| {
            PipelineError::Config(format!("dataset {ds}: reference study {reference} has no annotation on slice {top}"))
        })?;
        let seed = SliceMask {
            study_id: reference.clone(),
            slice_index: top,
            nx: rs.dims.nx,
            ny: rs.dims.ny,
            labels: read_mask_slice(seed_path, rs.dims.nx, rs.dims.ny).map_err(|e| PipelineError::Config(e.to_string()))?,
        };
        let plan_study =
            |s: &StudyManifest| PlanStudy { study_id: s.study_id.clone(), nx: s.dims.nx, ny: s.dims.ny, range: s.disc_indices.range() };
        let inference: Vec<&StudyManifest> = std.studies.iter().filter(|s| s.study_id != reference).collect();
        for s in &inference {
            let p = build_interleaved_plan(&plan_study(rs), &plan_study(s), &seed).map_err(internal)?;
            let file = PlanFile::from_plan(ds, &layout.standardized_manifest(ds), &p, |f| {
                let st = std.study(&f.study_id).expect("planned study is listed");
                (st.dims.nx, st.dims.ny, st.slices[f.slice_index].clone())
            });
            let dir = layout.plans(ds).join(&s.study_id);
            file.write(&dir.join("plan.json"))?;
            write_mask_slice(&dir.join("prompt.mask"), &seed.labels).map_err(internal)?;
            n_plans += 1;
        }
        let choice = ReferenceChoice { reference, inference: inference.iter().map(|s| s.study_id.clone()).collect() };
        write_file(&layout.plans(ds).join("reference.json"), serde_json::to_string_pretty(&choice).unwrap() + "\n")?;
    }
    Ok(format!("{n_plans} propagation plan(s)"))
}

fn read_reference(layout: &Layout, ds: &str) -> Result<ReferenceChoice> {
    let p = layout.plans(ds).join("reference.json");
    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, format!("{e} (run the plan stage)")))?;
    serde_json::from_str(&text).map_err(|e| io_err(&p, e))
}

fn segment(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let datasets = load_datasets(cfg)?;
    fresh_dir(&layout.root.join("stage1_pseudolabels"))?;
    let desc = cfg.descriptor(&cfg.backends.segment);
    let mut n = 0;
    for (_, m) in &datasets {
        let ds = &m.dataset_id;
        let choice = read_reference(layout, ds)?;
        let results = choice
            .inference
            .par_iter()
            .map(|study| {
                let dir = layout.plans(ds).join(study);
                let file = PlanFile::read(&dir.join("plan.json"))?;
                let seed_frame = &file.frames[0];
                let labels = read_mask_slice(&dir.join("prompt.mask"), seed_frame.nx, seed_frame.ny).map_err(internal)?;
                let seed = SliceMask {
                    study_id: file.seed.study_id.clone(),
                    slice_index: file.seed.slice_index,
                    nx: seed_frame.nx,
                    ny: seed_frame.ny,
                    labels,
                };
                // backend I/O lives with the outputs so the plans stay untouched
                let io = layout.pseudo(ds).join(study).join("backend");
                let scored = invoke_segmentation(&desc, &file, &seed, &io)?;
                let p = PropagationPlan { frames: file.frame_refs(), seed };
                let inf = demux_frames(&p, scored.clone(), FrameRole::Inference).map_err(internal)?;
                let refs = demux_frames(&p, scored, FrameRole::Reference).map_err(internal)?;
                Ok((study.clone(), inf, refs))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut pseudo: BTreeMap<String, Vec<ScoredMask>> = BTreeMap::new();
        for (i, (study, inf, refs)) in results.into_iter().enumerate() {
            // reference pseudo-labels come from the first plan
            if i == 0 {
                pseudo.insert(choice.reference.clone(), refs);
            }
            pseudo.insert(study, inf);
        }
        for (study, masks) in &pseudo {
            write_pseudo(&layout.pseudo(ds).join(study), masks)?;
            n += masks.len();
        }
    }
    Ok(format!("{n} stage-1 pseudo-label(s)"))
}

const PSEUDO_HEADER: &str = "slice_index,confidence";

fn write_pseudo(dir: &Path, masks: &[ScoredMask]) -> Result<()> {
    let mut csv = format!("{PSEUDO_HEADER}\n");
    for m in masks {
        write_mask_slice(&dir.join(format!("slice_{:03}.mask", m.mask.slice_index)), &m.mask.labels).map_err(internal)?;
        writeln!(csv, "{},{}", m.mask.slice_index, m.confidence).unwrap();
    }
    write_file(&dir.join("confidence.csv"), csv)
}

/// Stage-1 pseudo-labels of one study as persisted by the segment stage.
pub fn read_pseudo(dir: &Path, study: &StudyManifest) -> Result<Vec<ScoredMask>> {
    let p = dir.join("confidence.csv");
    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(PSEUDO_HEADER) {
        return Err(io_err(&p, "bad header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (z, c) = l.split_once(',').ok_or_else(|| io_err(&p, "malformed row"))?;
            let z: usize = z.parse().map_err(|_| io_err(&p, "bad slice index"))?;
            let confidence: f64 = c.parse().map_err(|_| io_err(&p, "bad confidence"))?;
            let (nx, ny) = (study.dims.nx, study.dims.ny);
            let labels = read_mask_slice(&dir.join(format!("slice_{z:03}.mask")), nx, ny).map_err(internal)?;
            Ok(ScoredMask {
                frame: crate::plan::FrameRef { study_id: study.study_id.clone(), slice_index: z, role: FrameRole::Inference },
                mask: SliceMask { study_id: study.study_id.clone(), slice_index: z, nx, ny, labels },
                confidence,
            })
        })
        .collect()
}

fn cascade_datasets(cfg: &RunConfig, layout: &Layout) -> Result<Vec<(CascadeDataset, DatasetManifest)>> {
    load_datasets(cfg)?
        .iter()
        .map(|(_, m)| {
            let std = load_standardized(layout, &m.dataset_id)?;
            let mut studies = Vec::new();
            let mut template = BTreeMap::new();
            for s in &std.studies {
                studies.push(CascadeStudy {
                    study_id: s.study_id.clone(),
                    range: s.disc_indices.range(),
                    pseudo: read_pseudo(&layout.pseudo(&m.dataset_id).join(&s.study_id), s)?,
                });
                template.insert(s.study_id.clone(), LabelVolume::zeros(s.dims, s.spacing));
            }
            Ok((CascadeDataset { dataset_id: m.dataset_id.clone(), studies, template }, std))
        })
        .collect()
}

fn write_report(layout: &Layout, r: &SelectionReport) -> Result<()> {
    write_file(&layout.reports().join(format!("step{}.json", r.step)), r.to_json())
}

fn select(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let datasets = cascade_datasets(cfg, layout)?;
    let pseudo: BTreeMap<String, Vec<PseudoLabel>> =
        datasets.iter().map(|(d, _)| (d.dataset_id.clone(), d.pseudo_labels())).collect();
    let (_, report) = select_stage1(&pseudo, &cfg.selection).map_err(internal)?;
    write_report(layout, &report)?;
    Ok(format!("{} of {} pseudo-label(s) selected", report.selected_count, report.candidate_count))
}

/// Cascade backend over the train/predict process protocol. Training masks
/// are written next to the model so every step can be inspected.
pub struct ProcessCascadeBackend<'a> {
    desc: BackendDescriptor,
    layout: &'a Layout,
    manifests: BTreeMap<String, DatasetManifest>,
}

impl<'a> ProcessCascadeBackend<'a> {
    pub fn new(desc: BackendDescriptor, layout: &'a Layout, manifests: BTreeMap<String, DatasetManifest>) -> Self {
        Self { desc, layout, manifests }
    }

    fn train_inner(&self, step: usize, examples: &[TrainingExample]) -> Result<ModelHandle> {
        let models = self.layout.models();
        let mask_dir = models.join(format!("step{step}_masks"));
        fresh_dir(&mask_dir)?;
        let pairs = examples
            .iter()
            .map(|e| {
                let m = self.manifests.get(&e.dataset_id).ok_or_else(|| internal(format!("unknown dataset {}", e.dataset_id)))?;
                let s = m.study(&e.study_id).ok_or_else(|| internal(format!("unknown study {}", e.study_id)))?;
                let mask = mask_dir.join(format!("{}__{}_{:03}.mask", e.dataset_id, e.study_id, e.slice_index));
                write_mask_slice(&mask, &e.labels).map_err(internal)?;
                Ok(TrainingPair {
                    study_id: e.study_id.clone(),
                    slice_index: e.slice_index,
                    position: e.position,
                    nx: e.nx,
                    ny: e.ny,
                    image: s.slices[e.slice_index].clone(),
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let job = TrainingJob { job_id: format!("step{step}"), pairs, model_out: models.join(format!("step{step}.model")) };
        Ok(invoke_training(&self.desc, &job, &models)?)
    }
}

impl CascadeBackend for ProcessCascadeBackend<'_> {
    type Model = ModelHandle;

    fn train(&self, step: usize, examples: &[TrainingExample]) -> std::result::Result<ModelHandle, String> {
        self.train_inner(step, examples).map_err(|e| e.to_string())
    }

    fn predict(
        &self,
        step: usize,
        model: &ModelHandle,
        dataset_id: &str,
    ) -> std::result::Result<BTreeMap<String, LabelVolume>, String> {
        let m = self.manifests.get(dataset_id).ok_or_else(|| format!("unknown dataset {dataset_id}"))?;
        let out = self.layout.models().join(format!("step{step}_pred")).join(dataset_id);
        invoke_predict(&self.desc, model, m, &self.layout.standardized_manifest(dataset_id), &out).map_err(|e| e.to_string())
    }
}

fn train(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let loaded = cascade_datasets(cfg, layout)?;
    fresh_dir(&layout.models())?;
    fresh_dir(&layout.root.join("final_masks"))?;
    let manifests = loaded.iter().map(|(d, m)| (d.dataset_id.clone(), m.clone())).collect();
    let datasets: Vec<CascadeDataset> = loaded.into_iter().map(|(d, _)| d).collect();
    let backend = ProcessCascadeBackend::new(cfg.descriptor(&cfg.backends.train), layout, manifests);
    let mut write_err = None;
    let outcome = run_cascade(&datasets, &backend, &cfg.selection, |r| {
        if let Err(e) = write_report(layout, r) {
            write_err.get_or_insert(e);
        }
    })
    .map_err(|e| match e {
        crate::selection::SelectionError::Backend { .. } => PipelineError::Backend(e.to_string()),
        other => internal(other),
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let mut n = 0;
    for (ds, vols) in &outcome.final_masks {
        for (study, v) in vols {
            write_label_volume(v, &layout.final_masks(ds).join(format!("{study}.mask"))).map_err(internal)?;
            n += 1;
        }
    }
    let sel: Vec<String> = outcome.reports.iter().map(|r| format!("step{} {}", r.step, r.selected_count)).collect();
    Ok(format!("{n} final mask(s); selected {}", sel.join(", ")))
}

/// Final masks of one dataset in standardized geometry.
pub fn read_final_masks(layout: &Layout, std: &DatasetManifest) -> Result<BTreeMap<String, LabelVolume>> {
    std.studies
        .iter()
        .map(|s| {
            let p = layout.final_masks(&std.dataset_id).join(format!("{}.mask", s.study_id));
            let v = read_label_volume(&p, s.dims, s.spacing).map_err(|e| io_err(&p, format!("{e} (run the train stage)")))?;
            Ok((s.study_id.clone(), v))
        })
        .collect()
}

fn to_native(mask: &LabelVolume, native: &LabelVolume) -> Result<LabelVolume> {
    let (m, n) = (mask.dims(), native.dims());
    if m.nz != n.nz {
        return Err(internal(format!("mask has {} slices, image has {}", m.nz, n.nz)));
    }
    let mut data = Vec::with_capacity(n.len());
    for z in 0..m.nz {
        data.extend(resize_labels_nearest(mask.slice(z), m.nx, m.ny, n.nx, n.ny));
    }
    LabelVolume::new(n, native.spacing(), data).map_err(internal)
}

fn quantify(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let datasets = load_datasets(cfg)?;
    fresh_dir(&layout.quant())?;
    let mut n = 0;
    for (_, m) in &datasets {
        let std = load_standardized(layout, &m.dataset_id)?;
        let finals = read_final_masks(layout, &std)?;
        let studies = m
            .studies
            .par_iter()
            .filter(|s| s.manual_masks.is_some())
            .map(|s| load_study(m, s).map_err(|e| internal(format!("{}: {e}", s.study_id))))
            .collect::<Result<Vec<_>>>()?;
        if studies.len() < m.studies.len() {
            log::warn!("{}: {} studies without manual masks are not quantified", m.dataset_id, m.studies.len() - studies.len());
        }
        let mut ai = BTreeMap::new();
        let mut manual = BTreeMap::new();
        for s in &studies {
            let man = s.manual.clone().expect("filtered on manual masks");
            ai.insert(s.study_id.clone(), to_native(&finals[&s.study_id], &man)?);
            manual.insert(s.study_id.clone(), man);
        }
        let inputs: Vec<QuantInput> = studies
            .iter()
            .map(|s| QuantInput { study_id: &s.study_id, image: &s.image, fat: s.fat.as_ref(), range: s.disc.range() })
            .collect();
        let table = quantify_dataset(&m.dataset_id, &inputs, &ai, &manual).map_err(internal)?;
        n += table.records.len();
        write_file(&layout.quant().join(format!("{}.csv", m.dataset_id)), table.to_csv())?;
    }
    Ok(format!("{n} quantification record(s)"))
}

fn read_quant(layout: &Layout, ds: &str) -> Result<QuantTable> {
    let p = layout.quant().join(format!("{ds}.csv"));
    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, format!("{e} (run the quantify stage)")))?;
    QuantTable::from_csv(&text).map_err(|e| io_err(&p, e))
}

/// Subject and phase per study when the whole dataset carries them.
pub fn study_design(m: &DatasetManifest) -> StudyDesign {
    let design: StudyDesign = m
        .studies
        .iter()
        .filter_map(|s| Some((s.study_id.clone(), (s.subject_id.clone()?, Phase::parse(s.phase.as_deref()?)?))))
        .collect();
    if design.len() == m.studies.len() {
        design
    } else {
        StudyDesign::new()
    }
}

fn stats_options(cfg: &RunConfig) -> StatsOptions {
    StatsOptions { seed: cfg.seed, ..cfg.stats }
}

fn dsc_rows(std: &DatasetManifest, stage: &str, masks: &BTreeMap<String, LabelVolume>) -> Result<Vec<DscRow>> {
    let mut rows = Vec::new();
    for side in Side::BOTH {
        let mut values = Vec::new();
        let mut groups = Vec::new();
        for s in &std.studies {
            let (Some(paths), Some(pred)) = (&s.manual_masks, masks.get(&s.study_id)) else {
                continue;
            };
            for z in s.disc_indices.range() {
                let truth = read_mask_slice(&paths[z], s.dims.nx, s.dims.ny).map_err(internal)?;
                values.push(dice(pred.slice(z), &truth, side.label()).map_err(internal)?);
                groups.push(s.subject_id.clone().unwrap_or_else(|| s.study_id.clone()));
            }
        }
        let grouped = std.studies.iter().any(|s| s.subject_id.is_some());
        if let Some(r) = dsc_row(&std.dataset_id, stage, side, &values, grouped.then_some(groups.as_slice())) {
            rows.push(r);
        }
    }
    Ok(rows)
}

fn pseudo_volumes(layout: &Layout, std: &DatasetManifest) -> Result<BTreeMap<String, LabelVolume>> {
    let mut out = BTreeMap::new();
    for s in &std.studies {
        let mut v = LabelVolume::zeros(s.dims, s.spacing);
        for m in read_pseudo(&layout.pseudo(&std.dataset_id).join(&s.study_id), s)? {
            v.set_slice(m.mask.slice_index, &m.mask.labels).map_err(internal)?;
        }
        out.insert(s.study_id.clone(), v);
    }
    Ok(out)
}

fn stats(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let datasets = load_datasets(cfg)?;
    let opts = stats_options(cfg);
    let mut rows = Vec::new();
    let mut dsc = Vec::new();
    for (_, m) in &datasets {
        let table = read_quant(layout, &m.dataset_id)?;
        rows.extend(compute_stats(&table, &study_design(m), &opts));
        let std = load_standardized(layout, &m.dataset_id)?;
        dsc.extend(dsc_rows(&std, "stage1", &pseudo_volumes(layout, &std)?)?);
        dsc.extend(dsc_rows(&std, "final", &read_final_masks(layout, &std)?)?);
    }
    write_file(&layout.stats().join("stats.csv"), stats_csv(&rows))?;
    write_file(&layout.stats().join("table.txt"), format_table(&rows))?;
    write_file(&layout.stats().join("dsc.csv"), dsc_csv(&dsc))?;
    Ok(format!("{} agreement row(s)", rows.len()))
}

fn report(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let datasets = load_datasets(cfg)?;
    let opts = stats_options(cfg);
    let dir = layout.stats().join("ba");
    fresh_dir(&dir)?;
    let mut n = 0;
    for (_, m) in &datasets {
        let table = read_quant(layout, &m.dataset_id)?;
        for row in compute_stats(&table, &study_design(m), &opts) {
            let Some(ba) = row.ba else { continue };
            let stem = format!("{}_{}_{}", row.dataset_id, row.metric.as_str(), row.side.as_str());
            if cfg.reports.contains(&ReportFormat::Csv) {
                write_file(&dir.join(format!("{stem}.csv")), bland_altman_csv(&row.pairs, &ba))?;
            }
            if cfg.reports.contains(&ReportFormat::Svg) {
                let title = format!("{} {} ({})", row.dataset_id, row.metric.as_str(), row.side.as_str());
                write_file(&dir.join(format!("{stem}.svg")), bland_altman_svg(&title, &row.pairs, &ba))?;
            }
            n += 1;
        }
    }
    Ok(format!("{n} Bland–Altman report(s)"))
}
