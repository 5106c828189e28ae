use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use paraseg_core::backend::{BackendDescriptor, BackendKind};
use paraseg_core::phantom::{generate_phantom_dataset, PhantomError, PhantomModality, PhantomSpec};
use paraseg_core::pipeline::{run_pipeline, run_stage, BackendSet, PipelineError, RunConfig, Stage, StageOutcome};

#[derive(Parser)]
#[command(name = "paraseg", version, about = "Paraspinal muscle segmentation and quantification pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-study work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Phantom(PhantomArgs),
    /// Standardize datasets, extract features and build propagation plans.
    Plan,
    /// Run stage-1 propagation for every plan.
    Segment,
    /// Select stage-1 pseudo-labels by confidence.
    Select,
    /// Run the three-step refinement cascade.
    Train,
    /// Measure volumes and intensities of final and manual masks.
    Quantify,
    /// Agreement statistics and DSC summaries.
    Stats,
    /// Bland–Altman CSV and SVG reports.
    Report,
    /// Whole-pipeline commands.
    Pipeline {
        #[command(subcommand)]
        command: PipelineCommand,
    },
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Run every stage in order.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Ct,
    Dixon,
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom specification (JSON); flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    dataset_id: Option<String>,
    #[arg(long)]
    modality: Option<ModalityArg>,
    #[arg(long)]
    n_studies: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Comma-separated acquisition phases, one study per phase per subject.
    #[arg(long, value_delimiter = ',')]
    phases: Option<Vec<String>>,
    /// Also write a run configuration using the synthetic backends.
    #[arg(long)]
    write_config: Option<PathBuf>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure { code: e.exit_code() as u8, error: e.into() }
    }
}

fn config_error(e: anyhow::Error) -> Failure {
    Failure { code: 2, error: e }
}

fn load_config(g: &Global) -> Result<RunConfig, Failure> {
    let path = g.config.as_deref().ok_or_else(|| config_error(anyhow::anyhow!("--config is required")))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = g.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_stages(g: &Global, stages: &[Stage]) -> Result<(), Failure> {
    let cfg = load_config(g)?;
    let pool = rayon_pool(cfg.jobs)?;
    pool.install(|| {
        let mut force = g.force;
        for &stage in stages {
            let outcome = run_stage(&cfg, stage, force)?;
            force |= outcome == StageOutcome::Ran;
            report_outcome(stage, outcome);
        }
        Ok(())
    })
}

fn rayon_pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure { code: 4, error: e.into() })
}

fn report_outcome(stage: Stage, outcome: StageOutcome) {
    match outcome {
        StageOutcome::Ran => eprintln!("{}: done", stage.as_str()),
        StageOutcome::UpToDate => eprintln!("{}: up to date", stage.as_str()),
    }
}

fn phantom_config(dataset: &Path, sigma: f64, out: PathBuf) -> RunConfig {
    let mut segment = BackendDescriptor::new("phantom-segmenter", "phantom-segmenter", BackendKind::Segment);
    segment.env.insert("PHANTOM_SIGMA".into(), sigma.to_string());
    let backends = BackendSet {
        segment,
        features: BackendDescriptor::new("phantom-features", "phantom-features", BackendKind::Features),
        train: BackendDescriptor::new("memorizing-trainer", "memorizing-trainer", BackendKind::TrainPredict),
    };
    RunConfig::new(vec![dataset.to_path_buf()], backends, out)
}

fn phantom(g: &Global, args: &PhantomArgs) -> Result<(), Failure> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| p.display().to_string()).map_err(config_error)?;
            serde_json::from_str(&text).with_context(|| p.display().to_string()).map_err(config_error)?
        }
        None => PhantomSpec::default(),
    };
    if let Some(v) = &args.dataset_id {
        spec.dataset_id = v.clone();
    }
    if let Some(m) = args.modality {
        spec.modality = match m {
            ModalityArg::Ct => PhantomModality::Ct,
            ModalityArg::Dixon => PhantomModality::Dixon,
        };
    }
    if let Some(n) = args.n_studies {
        spec.n_studies = n;
    }
    if let Some(s) = args.sigma {
        spec.sigma = s;
    }
    if let Some(p) = &args.phases {
        spec.phases = p.clone();
    }
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    let out = g.out.clone().ok_or_else(|| config_error(anyhow::anyhow!("--out is required")))?;
    let (manifest, _) = generate_phantom_dataset(&spec, &out).map_err(|e| match e {
        PhantomError::SpecInvalid(_) => config_error(e.into()),
        other => Failure { code: 4, error: other.into() },
    })?;
    eprintln!("phantom: {} studies in {}", manifest.studies.len(), out.display());
    if let Some(path) = &args.write_config {
        let mut cfg = phantom_config(&out.join("manifest.json"), spec.sigma, PathBuf::from("run"));
        cfg.seed = spec.seed;
        let text = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
        std::fs::write(path, text)
            .with_context(|| path.display().to_string())
            .map_err(|e| Failure { code: 4, error: e })?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Phantom(args) => phantom(g, args),
        Command::Plan => run_stages(g, &[Stage::Prepare, Stage::Plan]),
        Command::Segment => run_stages(g, &[Stage::Segment]),
        Command::Select => run_stages(g, &[Stage::Select]),
        Command::Train => run_stages(g, &[Stage::Train]),
        Command::Quantify => run_stages(g, &[Stage::Quantify]),
        Command::Stats => run_stages(g, &[Stage::Stats]),
        Command::Report => run_stages(g, &[Stage::Report]),
        Command::Pipeline { command: PipelineCommand::Run } => {
            let cfg = load_config(g)?;
            for (stage, outcome) in run_pipeline(&cfg, g.force)? {
                report_outcome(stage, outcome);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("paraseg: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
