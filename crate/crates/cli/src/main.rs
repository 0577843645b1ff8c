//! `crownfit` command line: the full pipeline plus one subcommand per stage.
//!
//! Every subcommand prints a JSON report to stdout, or writes it to the path
//! given by `--report`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crownfit::classify::{classify, ScanClass};
use crownfit::fdi::NUM_CLASSES;
use crownfit::mesh::{load_mesh, save_mesh, LabeledMesh, MeshFormat};
use crownfit::pipeline::fixtures::generate_fixtures;
use crownfit::pipeline::{
    align_to_preparation, classifier_provider, evaluate_files, fit_to_scan, load_crown, load_labels, refine_labels, run_pipeline,
    save_labels, ContextFile, PipelineConfig, SegmentationChoice,
};
use crownfit::refine::{corrupt_labels, FaceLabelProbabilities};
use crownfit::registration::register_with_routing;
use crownfit::retrieval::{retrieve_for_context, EmbeddingIndex};
use crownfit::templates::TemplateLibrary;
use crownfit::{Error, Fdi, Result, Stage};

#[derive(Parser)]
#[command(name = "crownfit", version, about = "Propose a crown for a prepared tooth in an intraoral scan")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Last stage to run (`run` only).
    #[arg(long, global = true, value_parser = parse_stage)]
    stop_after: Option<Stage>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassifierArg {
    Baseline,
    Sidecar,
}

#[derive(Subcommand)]
enum Command {
    /// Classify a scan as a full or partial upper or lower arch.
    Classify {
        scan: PathBuf,
        #[arg(long, value_enum)]
        provider: Option<ClassifierArg>,
    },
    /// Register a scan to the canonical template frame.
    Register {
        scan: PathBuf,
        /// Skip classification and use this class.
        #[arg(long)]
        class: Option<String>,
        /// Canonical-pose mesh to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine per-face labels with graph cuts and small-component cleanup.
    Refine {
        mesh: PathBuf,
        /// Per-face class probabilities (JSON or binary).
        #[arg(long, conflicts_with = "corrupt")]
        probabilities: Option<PathBuf>,
        /// Ground-truth labels to corrupt into probabilities.
        #[arg(long)]
        corrupt: Option<PathBuf>,
        /// Ground truth for before/after metrics.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick a crown template from scan context embeddings.
    Retrieve {
        /// Context file; `target` names the tooth.
        context: PathBuf,
        /// Embedding store; defaults to the configured one.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Align a crown template to the preparation of a labeled scan.
    Align {
        /// Canonical-pose scan.
        scan: PathBuf,
        /// Refined per-face labels of the scan.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        crown: PathBuf,
        #[arg(long)]
        fdi: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an aligned crown to its neighbors and the opposing jaw.
    Fit {
        /// Aligned crown.
        crown: PathBuf,
        /// Canonical-pose scan.
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        fdi: u8,
        #[arg(long)]
        antagonist: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write artifacts to the output directory.
    Run {
        scan: PathBuf,
        #[arg(long)]
        fdi: u8,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted labels against ground truth around a preparation.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        fdi: u8,
    },
    /// Write a synthetic case with templates, embeddings and a config.
    Fixtures { dir: PathBuf },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn mesh(path: &Path) -> Result<LabeledMesh> {
    load_mesh(path, MeshFormat::from_path(path)?)
}

fn labeled(scan: &Path, labels: &Path) -> Result<LabeledMesh> {
    let mut m = mesh(scan)?;
    m.face_labels = None;
    m.with_labels(load_labels(labels)?)
}

fn write(path: &Path, m: &LabeledMesh) -> Result<()> {
    for w in save_mesh(m, path, MeshFormat::from_path(path)?)? {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn emit(cli: &Cli, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match &cli.report {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let mut config = load_config(cli)?;
    if cli.stop_after.is_some() && !matches!(cli.command, Command::Run { .. }) {
        return Err(Error::InvalidArgument("--stop-after only applies to `run`".into()));
    }
    match &cli.command {
        Command::Classify { scan, provider } => {
            if let Some(p) = provider {
                config.providers.classifier = match p {
                    ClassifierArg::Baseline => crownfit::pipeline::ClassifierChoice::Baseline,
                    ClassifierArg::Sidecar => crownfit::pipeline::ClassifierChoice::Sidecar,
                };
            }
            let c = classify(classifier_provider(&config, scan)?.as_ref(), &mesh(scan)?)?;
            emit(cli, &c)
        }
        Command::Register { scan, class, out } => {
            let m = mesh(scan)?;
            let class: ScanClass = match class {
                Some(c) => c.parse()?,
                None => classify(classifier_provider(&config, scan)?.as_ref(), &m)?.class,
            };
            let lib = TemplateLibrary::load(&config.paths.templates)?;
            let r = register_with_routing(&m, class, &lib, &config.registration_params())?;
            write(out, &m.transformed(&r.best.transform))?;
            emit(cli, &r)
        }
        Command::Refine { mesh: path, probabilities, corrupt, ground_truth, out } => {
            let m = mesh(path)?;
            let (probs, provider) = match (probabilities, corrupt) {
                (Some(p), _) => (FaceLabelProbabilities::load(p)?, SegmentationChoice::Probabilities),
                (None, Some(gt)) => (
                    corrupt_labels(&load_labels(gt)?, NUM_CLASSES, &config.corruptor_params())?,
                    SegmentationChoice::Corruptor,
                ),
                (None, None) => return Err(Error::InvalidArgument("give --probabilities or --corrupt".into())),
            };
            let gt = ground_truth.as_deref().map(load_labels).transpose()?;
            let (labels, summary) = refine_labels(&m, &probs, &config.graphcut, gt.as_deref(), provider)?;
            save_labels(out, &labels)?;
            emit(cli, &summary)
        }
        Command::Retrieve { context, embeddings } => {
            let store = embeddings.as_ref().unwrap_or(&config.paths.embeddings);
            let r = retrieve_for_context(&ContextFile::load(context)?.query()?, &EmbeddingIndex::load(store)?)?;
            emit(cli, &r)
        }
        Command::Align { scan, labels, crown, fdi, out } => {
            let target = Fdi::new(*fdi)?;
            let (aligned, summary, warnings) = align_to_preparation(&labeled(scan, labels)?, &load_crown(crown)?, target, config.alignment.tau)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            write(out, &aligned.mesh)?;
            emit(cli, &summary)
        }
        Command::Fit { crown, scan, labels, fdi, antagonist, out } => {
            let target = Fdi::new(*fdi)?;
            let opposing = antagonist.as_deref().map(mesh).transpose()?;
            let (fitted, report) = fit_to_scan(&labeled(scan, labels)?, &mesh(crown)?, opposing.as_ref(), target, &config.fitting)?;
            write(out, &fitted)?;
            emit(cli, &report)
        }
        Command::Run { scan, fdi, out } => {
            if let Some(o) = out {
                config.output_dir = o.clone();
            }
            let report = run_pipeline(scan, *fdi, &config, cli.stop_after)?;
            match &cli.report {
                Some(_) => emit(cli, &report),
                None => {
                    eprintln!("report written to {}", config.output_dir.join(crownfit::pipeline::REPORT_FILE).display());
                    Ok(())
                }
            }
        }
        Command::Evaluate { pred, gt, mesh, fdi } => emit(cli, &evaluate_files(pred, gt, mesh, *fdi)?),
        Command::Fixtures { dir } => emit(cli, &generate_fixtures(dir, config.seed)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.stage() {
                Some(stage) => eprintln!("error in {stage}: {e}"),
                None => eprintln!("error: {e}"),
            }
            ExitCode::FAILURE
        }
    }
}
