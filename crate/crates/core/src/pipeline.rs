//! End-to-end crown proposal: classify, register, refine labels, retrieve,
//! align and fit, with per-stage artifacts and a JSON run report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_crown, arch_centroids, fit_arch_spline, spline_frame_at, AlignmentTrace, TargetVectors, DEFAULT_TAU};
use crate::classify::{classify, BaselineClassifier, Classification, ClassifierProvider, ConstantClassifier, ScanClass, SidecarClassifier};
use crate::crown::CrownTemplate;
use crate::error::{Error, Result, Stage, StageExt, Warning};
use crate::fdi::{Fdi, NUM_CLASSES, PREPARED};
use crate::fitting::{fit_crown, FittingParams, FittingReport};
use crate::mesh::{estimate_vertex_normals, load_mesh, save_mesh, LabeledMesh, MeshFormat, RigidTransform};
use crate::metrics::{centroid_error, label_metrics, summarize, LabelMetrics, MetricSummary};
use crate::refine::{corrupt_labels, graphcut_refine, reassign_small_components, CorruptorParams, FaceLabelProbabilities, GraphCutParams, PottsEnergy, MIN_COMPONENT_FACES};
use crate::registration::{register_with_routing, RegistrationParams};
use crate::retrieval::{retrieve_for_context, ContextQuery, Embedding, EmbeddingIndex, RetrievalResult};
use crate::templates::{extract_tooth_centroids, TemplateLibrary};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Stages that can end a run early, in execution order.
pub const RUN_STAGES: [Stage; 6] = [
    Stage::Classification,
    Stage::Registration,
    Stage::Segmentation,
    Stage::Retrieval,
    Stage::Alignment,
    Stage::Fitting,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierChoice {
    /// Geometric rules on point features.
    Baseline,
    /// `<scan>.class.json` written by an external model.
    Sidecar,
    /// The class given by `providers.constant_class`.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationChoice {
    /// Ground-truth labels with random flips, softened to probabilities.
    Corruptor,
    /// Per-face probabilities from `paths.probabilities`.
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Providers {
    pub classifier: ClassifierChoice,
    pub constant_class: Option<String>,
    pub segmentation: SegmentationChoice,
}

impl Default for Providers {
    fn default() -> Self {
        Providers {
            classifier: ClassifierChoice::Baseline,
            constant_class: None,
            segmentation: SegmentationChoice::Corruptor,
        }
    }
}

/// Input locations. Relative paths are resolved against the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Template library directory (with `manifest.json`).
    pub templates: PathBuf,
    /// Embedding store holding reference jaws and crown templates.
    pub embeddings: PathBuf,
    /// Directory of annotated crown meshes named `<template id>.ply`.
    pub crowns: PathBuf,
    /// Scan context embeddings; defaults to `<scan>.context.json`.
    pub context: Option<PathBuf>,
    /// Ground-truth face labels; defaults to `<scan>.labels.json`, then to
    /// labels stored in the scan itself.
    pub ground_truth: Option<PathBuf>,
    pub probabilities: Option<PathBuf>,
    /// Opposing jaw in the canonical frame. Occlusal correction is skipped
    /// when absent.
    pub antagonist: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentParams {
    pub tau: f64,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        AlignmentParams { tau: DEFAULT_TAU }
    }
}

/// Pipeline configuration, read from TOML. The global `seed` replaces the
/// seeds of the registration and corruptor blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub paths: Paths,
    pub providers: Providers,
    pub registration: RegistrationParams,
    pub graphcut: GraphCutParams,
    pub corruptor: CorruptorParams,
    pub alignment: AlignmentParams,
    pub fitting: FittingParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            paths: Paths::default(),
            providers: Providers::default(),
            registration: RegistrationParams::default(),
            graphcut: GraphCutParams::default(),
            corruptor: CorruptorParams::default(),
            alignment: AlignmentParams::default(),
            fitting: FittingParams::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        c.resolve_paths(&base);
        Ok(c)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        let p = &mut self.paths;
        for path in [&mut p.templates, &mut p.embeddings, &mut p.crowns] {
            resolve(base, path);
        }
        for path in [&mut p.context, &mut p.ground_truth, &mut p.probabilities, &mut p.antagonist]
            .into_iter()
            .flatten()
        {
            resolve(base, path);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parameter ranges and required input paths. A configured antagonist
    /// that does not exist is allowed; the run reports it and skips the
    /// occlusal step.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.registration.validate().map_err(cfg)?;
        self.graphcut.validate().map_err(cfg)?;
        self.fitting.validate()?;
        if !(self.alignment.tau > 0.0 && self.alignment.tau < 1.0) {
            return Err(Error::Config(format!("alignment.tau must lie in (0, 1), got {}", self.alignment.tau)));
        }
        let c = &self.corruptor;
        if !(0.0..=1.0).contains(&c.flip_fraction) || !(0.0..1.0).contains(&c.softness) {
            return Err(Error::Config("corruptor.flip_fraction must lie in [0, 1] and softness in [0, 1)".into()));
        }
        let need = |what: &str, p: &Path, dir: bool| {
            let ok = if dir { p.join("manifest.json").is_file() || (what == "crowns" && p.is_dir()) } else { p.is_file() };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("paths.{what} '{}' not found", p.display())))
            }
        };
        need("templates", &self.paths.templates, true)?;
        need("embeddings", &self.paths.embeddings, false)?;
        need("crowns", &self.paths.crowns, true)?;
        if self.providers.segmentation == SegmentationChoice::Probabilities {
            match &self.paths.probabilities {
                Some(p) => need("probabilities", p, false)?,
                None => return Err(Error::Config("probabilities provider needs paths.probabilities".into())),
            }
        }
        if self.providers.classifier == ClassifierChoice::Constant {
            let class = self
                .providers
                .constant_class
                .as_deref()
                .ok_or_else(|| Error::Config("constant classifier needs providers.constant_class".into()))?;
            class.parse::<ScanClass>().map_err(cfg)?;
        }
        Ok(())
    }

    /// Registration parameters with the global seed applied.
    pub fn registration_params(&self) -> RegistrationParams {
        RegistrationParams {
            seed: self.seed,
            ..self.registration
        }
    }

    /// Corruptor parameters seeded from the global seed.
    pub fn corruptor_params(&self) -> CorruptorParams {
        CorruptorParams {
            seed: self.seed.wrapping_add(1),
            ..self.corruptor
        }
    }
}

/// Per-face labels as a JSON array.
pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn save_labels(path: &Path, labels: &[u8]) -> Result<()> {
    std::fs::write(path, serde_json::to_string(labels)?)?;
    Ok(())
}

/// Context embeddings of a scan around its target tooth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFile {
    pub target: u8,
    pub slots: BTreeMap<u8, Embedding>,
}

impl ContextFile {
    pub fn load(path: &Path) -> Result<ContextFile> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn from_query(q: &ContextQuery) -> ContextFile {
        ContextFile {
            target: q.target.code(),
            slots: q.slots.clone(),
        }
    }

    pub fn query(&self) -> Result<ContextQuery> {
        ContextQuery::new(Fdi::new(self.target)?, self.slots.clone())
    }
}

/// File-name suffix helper: `scan.ply` → `scan.<ext>`.
fn sibling(scan: &Path, ext: &str) -> PathBuf {
    scan.with_extension(ext)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptSummary {
    pub template: String,
    pub fitness: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationSummary {
    pub template: String,
    pub fitness: f64,
    pub inlier_rmse: f64,
    /// Scan coordinates to the canonical frame.
    pub transform: RigidTransform,
    pub attempts: Vec<AttemptSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub provider: SegmentationChoice,
    pub energy_argmax: f64,
    pub energy_refined: f64,
    pub faces_changed_by_graphcut: usize,
    pub faces_changed_by_cleanup: usize,
    /// Against ground truth, when available.
    pub metrics_argmax: Option<LabelMetrics>,
    pub metrics_refined: Option<LabelMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub targets: TargetVectors,
    pub transform: RigidTransform,
    pub trace: AlignmentTrace,
    pub spline_parameter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Option<Stage>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub target_fdi: u8,
    pub seed: u64,
    pub stop_after: Option<Stage>,
    /// Completed stages in execution order.
    pub timings: Vec<StageTiming>,
    pub classification: Option<Classification>,
    pub registration: Option<RegistrationSummary>,
    pub segmentation: Option<SegmentationSummary>,
    pub retrieval: Option<RetrievalResult>,
    pub alignment: Option<AlignmentSummary>,
    pub fitting: Option<FittingReport>,
    /// An antagonist path was configured but the file does not exist.
    pub antagonist_missing: bool,
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
    pub error: Option<StageFailure>,
}

impl RunReport {
    fn new(fdi: u8, seed: u64, stop_after: Option<Stage>) -> RunReport {
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            target_fdi: fdi,
            seed,
            stop_after,
            timings: Vec::new(),
            classification: None,
            registration: None,
            segmentation: None,
            retrieval: None,
            alignment: None,
            fitting: None,
            antagonist_missing: false,
            artifacts: Vec::new(),
            warnings: Vec::new(),
            error: None,
        }
    }

    /// Copy with every timing set to zero, for run-to-run comparison.
    pub fn without_timings(&self) -> RunReport {
        let mut r = self.clone();
        for t in &mut r.timings {
            t.seconds = 0.0;
        }
        r
    }

    pub fn total_seconds(&self) -> f64 {
        self.timings.iter().map(|t| t.seconds).sum()
    }
}

pub const REPORT_FILE: &str = "report.json";

struct Run<'a> {
    config: &'a PipelineConfig,
    out: PathBuf,
    report: RunReport,
}

impl Run<'_> {
    fn timed<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let r = f(self).stage(stage);
        if r.is_ok() {
            self.report.timings.push(StageTiming {
                stage,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        r
    }

    fn write_mesh(&mut self, name: &str, mesh: &LabeledMesh) -> Result<()> {
        save_mesh(mesh, &self.out.join(name), MeshFormat::Ply)?;
        self.report.artifacts.push(name.to_string());
        Ok(())
    }

    fn done(&self, stage: Stage) -> bool {
        self.report.stop_after == Some(stage)
    }

    fn write_report(&self) -> Result<()> {
        std::fs::write(self.out.join(REPORT_FILE), serde_json::to_string_pretty(&self.report)? + "\n")?;
        Ok(())
    }
}

/// The configured scan classifier.
pub fn classifier_provider(config: &PipelineConfig, scan_path: &Path) -> Result<Box<dyn ClassifierProvider>> {
    Ok(match config.providers.classifier {
        ClassifierChoice::Baseline => Box::new(BaselineClassifier::default()),
        ClassifierChoice::Sidecar => Box::new(SidecarClassifier::for_scan(scan_path)),
        ClassifierChoice::Constant => {
            let class = config
                .providers
                .constant_class
                .as_deref()
                .ok_or_else(|| Error::Config("constant classifier needs providers.constant_class".into()))?
                .parse()?;
            Box::new(ConstantClassifier(Classification { class, confidence: 1.0 }))
        }
    })
}

fn ground_truth(config: &PipelineConfig, scan_path: &Path, scan: &LabeledMesh) -> Result<Option<Vec<u8>>> {
    let path = config.paths.ground_truth.clone().unwrap_or_else(|| sibling(scan_path, "labels.json"));
    let labels = if path.is_file() {
        Some(load_labels(&path)?)
    } else {
        scan.face_labels.clone()
    };
    if let Some(l) = &labels {
        if l.len() != scan.num_faces() {
            return Err(Error::InvalidArgument(format!(
                "ground truth has {} labels for {} faces",
                l.len(),
                scan.num_faces()
            )));
        }
    }
    Ok(labels)
}

/// Runs the pipeline on one scan, writing artifacts and `report.json` to the
/// configured output directory. On failure the partial report is written
/// before the stage-tagged error is returned.
pub fn run_pipeline(scan_path: &Path, fdi: u8, config: &PipelineConfig, stop_after: Option<Stage>) -> Result<RunReport> {
    let target = Fdi::new(fdi)?;
    if let Some(s) = stop_after {
        if !RUN_STAGES.contains(&s) {
            return Err(Error::InvalidArgument(format!("cannot stop after stage '{s}'")));
        }
    }
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let mut run = Run {
        config,
        out: config.output_dir.clone(),
        report: RunReport::new(fdi, config.seed, stop_after),
    };
    match execute(&mut run, scan_path, target) {
        Ok(()) => {
            run.write_report()?;
            Ok(run.report)
        }
        Err(e) => {
            run.report.error = Some(StageFailure {
                stage: e.stage(),
                message: e.to_string(),
            });
            run.write_report()?;
            Err(e)
        }
    }
}

fn execute(run: &mut Run, scan_path: &Path, target: Fdi) -> Result<()> {
    let config = run.config;
    let scan = load_mesh(scan_path, MeshFormat::from_path(scan_path)?).stage(Stage::Load)?;
    let gt = ground_truth(config, scan_path, &scan).stage(Stage::Load)?;
    let mut scan = scan;
    scan.face_labels = None;

    let class = run.timed(Stage::Classification, |_| classify(classifier_provider(config, scan_path)?.as_ref(), &scan))?;
    run.report.classification = Some(class);
    if run.done(Stage::Classification) {
        return Ok(());
    }

    let canonical = run.timed(Stage::Registration, |run| {
        let lib = TemplateLibrary::load(&config.paths.templates)?;
        let routing = register_with_routing(&scan, class.class, &lib, &config.registration_params())?;
        let best = routing.best;
        let key = best.chosen_template.expect("routing sets the template");
        if key.jaw != target.jaw() {
            run.report.warnings.push(format!(
                "scan registered to the {} template but tooth {target} is on the other jaw",
                key.name()
            ));
        }
        run.report.registration = Some(RegistrationSummary {
            template: key.name(),
            fitness: best.fitness,
            inlier_rmse: best.inlier_rmse,
            transform: best.transform,
            attempts: routing
                .attempts
                .iter()
                .map(|a| AttemptSummary {
                    template: a.key.name(),
                    fitness: a.result.as_ref().map(|r| r.fitness),
                    error: a.error.clone(),
                })
                .collect(),
        });
        let canonical = scan.transformed(&best.transform);
        run.write_mesh("canonical_scan.ply", &canonical)?;
        Ok(canonical)
    })?;
    if run.done(Stage::Registration) {
        return Ok(());
    }

    let labels = run.timed(Stage::Segmentation, |run| {
        let probs = match config.providers.segmentation {
            SegmentationChoice::Corruptor => {
                let gt = gt
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("corruptor provider needs ground-truth labels".into()))?;
                corrupt_labels(gt, NUM_CLASSES, &config.corruptor_params())?
            }
            SegmentationChoice::Probabilities => {
                FaceLabelProbabilities::load(config.paths.probabilities.as_ref().expect("validated"))?
            }
        };
        let (labels, summary) = refine_labels(&canonical, &probs, &config.graphcut, gt.as_deref(), config.providers.segmentation)?;
        run.report.segmentation = Some(summary);
        save_labels(&run.out.join("refined_labels.json"), &labels)?;
        run.report.artifacts.push("refined_labels.json".into());
        Ok(labels)
    })?;
    if run.done(Stage::Segmentation) {
        return Ok(());
    }
    let mut labeled = canonical;
    labeled.face_labels = Some(labels);

    let crown = run.timed(Stage::Retrieval, |run| {
        let index = EmbeddingIndex::load(&config.paths.embeddings)?;
        let ctx_path = config.paths.context.clone().unwrap_or_else(|| sibling(scan_path, "context.json"));
        let query = ContextFile::load(&ctx_path)?.query()?;
        if query.target != target {
            return Err(Error::InvalidArgument(format!(
                "context file is for tooth {}, not {target}",
                query.target
            )));
        }
        let result = retrieve_for_context(&query, &index)?;
        let crown = load_crown(&config.paths.crowns.join(format!("{}.ply", result.template)))?;
        run.report.retrieval = Some(result);
        Ok(crown)
    })?;
    if run.done(Stage::Retrieval) {
        return Ok(());
    }

    let aligned = run.timed(Stage::Alignment, |run| {
        let (aligned, summary, warnings) = align_to_preparation(&labeled, &crown, target, config.alignment.tau)?;
        run.report.warnings.extend(warnings.iter().map(|w| w.to_string()));
        run.report.alignment = Some(summary);
        run.write_mesh("aligned_crown.ply", &aligned.mesh)?;
        Ok(aligned)
    })?;
    if run.done(Stage::Alignment) {
        return Ok(());
    }

    run.timed(Stage::Fitting, |run| {
        let opposing = match &config.paths.antagonist {
            Some(p) if p.is_file() => Some(load_mesh(p, MeshFormat::from_path(p)?)?),
            Some(p) => {
                run.report.antagonist_missing = true;
                run.report
                    .warnings
                    .push(format!("antagonist '{}' not found; occlusal correction skipped", p.display()));
                None
            }
            None => None,
        };
        let (fitted, report) = fit_to_scan(&labeled, &aligned.mesh, opposing.as_ref(), target, &config.fitting)?;
        run.report.fitting = Some(report);
        run.write_mesh("fitted_crown.ply", &fitted)?;
        Ok(())
    })
}

/// Graph-cut refinement followed by small-component cleanup.
pub fn refine_labels(
    mesh: &LabeledMesh,
    probs: &FaceLabelProbabilities,
    params: &GraphCutParams,
    gt: Option<&[u8]>,
    provider: SegmentationChoice,
) -> Result<(Vec<u8>, SegmentationSummary)> {
    if probs.num_faces() != mesh.num_faces() {
        return Err(Error::InvalidArgument(format!(
            "{} probability rows for {} faces",
            probs.num_faces(),
            mesh.num_faces()
        )));
    }
    let argmax = probs.argmax();
    let refined = graphcut_refine(mesh, probs, params)?;
    let cleaned = reassign_small_components(&refined, mesh, MIN_COMPONENT_FACES)?;
    let energy = PottsEnergy::new(mesh, probs, params)?;
    let diff = |a: &[u8], b: &[u8]| a.iter().zip(b).filter(|(x, y)| x != y).count();
    let metrics = |l: &[u8]| gt.map(|g| label_metrics(l, g)).transpose();
    let summary = SegmentationSummary {
        provider,
        energy_argmax: energy.energy(&argmax),
        energy_refined: energy.energy(&refined),
        faces_changed_by_graphcut: diff(&argmax, &refined),
        faces_changed_by_cleanup: diff(&refined, &cleaned),
        metrics_argmax: metrics(&argmax)?,
        metrics_refined: metrics(&cleaned)?,
    };
    Ok((cleaned, summary))
}

/// Reads an annotated crown mesh, estimating normals when the file has none.
pub fn load_crown(path: &Path) -> Result<CrownTemplate> {
    let mut mesh = load_mesh(path, MeshFormat::from_path(path)?)?;
    if mesh.vertex_normals.is_none() {
        mesh = estimate_vertex_normals(&mesh)?.0;
    }
    CrownTemplate::from_mesh(mesh)
}

/// Aligns `crown` to the faces labeled as the preparation in a labeled,
/// canonical-pose scan, using the arch through the other tooth centroids.
pub fn align_to_preparation(
    scan: &LabeledMesh,
    crown: &CrownTemplate,
    target: Fdi,
    tau: f64,
) -> Result<(CrownTemplate, AlignmentSummary, Vec<Warning>)> {
    let prep_faces = scan.faces_with_labels(&[PREPARED]);
    let c_prep = scan
        .area_centroid_of(prep_faces.iter().copied())
        .ok_or_else(|| Error::InvalidArgument("no faces are labeled as the preparation".into()))?;
    let centroids = extract_tooth_centroids(scan)?;
    let spline = fit_arch_spline(&arch_centroids(&centroids, target, c_prep))?;
    let frame = spline_frame_at(&spline, &c_prep, target.side())?;
    let normals: Vec<Vector3<f64>> = prep_faces.iter().filter_map(|&f| scan.face_normal(f)).collect();
    let (targets, mut warnings) = TargetVectors::from_preparation(&frame, &normals, c_prep, target.jaw().occlusal_dir(), tau)?;
    warnings.splice(0..0, frame.warnings.iter().cloned());
    let a = align_crown(crown, &targets)?;
    let summary = AlignmentSummary {
        targets,
        transform: a.transform,
        trace: a.trace,
        spline_parameter: frame.parameter,
    };
    Ok((crown.transformed(&a.transform), summary, warnings))
}

/// Fits an aligned crown against the scan faces of its mesial and distal
/// neighbors and, when given, the opposing jaw.
pub fn fit_to_scan(
    scan: &LabeledMesh,
    crown: &LabeledMesh,
    opposing: Option<&LabeledMesh>,
    target: Fdi,
    params: &FittingParams,
) -> Result<(LabeledMesh, FittingReport)> {
    let mut classes = vec![target.mesial_neighbor().class()];
    classes.extend(target.distal_neighbor().map(|d| d.class()));
    let neighbors = scan.submesh(&scan.faces_with_labels(&classes));
    if neighbors.num_faces() == 0 {
        return Err(Error::InvalidArgument(format!("no neighbor faces around tooth {target}")));
    }
    fit_crown(crown, &neighbors, opposing, target, params)
}

/// Metrics of one labeled region relative to the preparation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region: String,
    pub class: u8,
    pub dsc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// mm; the bounding-box diagonal on a miss.
    pub centroid_error: f64,
    pub miss: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub prep_fdi: u8,
    pub faces: usize,
    pub overall: LabelMetrics,
    /// Prepared tooth, mesial neighbor and, when present, distal neighbor.
    pub rows: Vec<RegionRow>,
    /// Regions absent from the ground truth.
    pub absent: Vec<String>,
}

pub fn evaluate(pred: &[u8], gt: &[u8], mesh: &LabeledMesh, prep: Fdi) -> Result<EvaluationReport> {
    if pred.len() != mesh.num_faces() || gt.len() != mesh.num_faces() {
        return Err(Error::InvalidArgument(format!(
            "label counts {} / {} do not match {} faces",
            pred.len(),
            gt.len(),
            mesh.num_faces()
        )));
    }
    let overall = label_metrics(pred, gt)?;
    let diag = mesh.bounding_box_diagonal()?;
    let mut regions = vec![("prepared", PREPARED), ("mesial_adjacent", prep.mesial_neighbor().class())];
    if let Some(d) = prep.distal_neighbor() {
        regions.push(("distal_adjacent", d.class()));
    }
    let faces_of = |labels: &[u8], c: u8| -> Vec<usize> {
        labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(f, _)| f).collect()
    };
    let mut rows = Vec::new();
    let mut absent = Vec::new();
    for (name, class) in regions {
        let g = faces_of(gt, class);
        if g.is_empty() {
            absent.push(name.to_string());
            continue;
        }
        let ce = centroid_error(mesh, &faces_of(pred, class), &g, diag)?;
        let m = overall.per_class[&class];
        rows.push(RegionRow {
            region: name.to_string(),
            class,
            dsc: m.dsc,
            precision: m.precision,
            recall: m.recall,
            centroid_error: ce.distance,
            miss: ce.miss,
        });
    }
    Ok(EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        prep_fdi: prep.code(),
        faces: mesh.num_faces(),
        overall,
        rows,
        absent,
    })
}

pub fn evaluate_files(pred: &Path, gt: &Path, mesh: &Path, prep: u8) -> Result<EvaluationReport> {
    let mesh = load_mesh(mesh, MeshFormat::from_path(mesh)?)?;
    evaluate(&load_labels(pred)?, &load_labels(gt)?, &mesh, Fdi::new(prep)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub dsc: MetricSummary,
    pub centroid_error: MetricSummary,
}

/// Mean, spread and bootstrap interval of each region's DSC and centroid
/// error across cases. A missed region counts as DSC 0.
pub fn summarize_evaluations(reports: &[EvaluationReport], resamples: usize, seed: u64) -> Result<BTreeMap<String, RegionSummary>> {
    let mut by: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for r in reports {
        for row in &r.rows {
            let e = by.entry(row.region.clone()).or_default();
            e.0.push(row.dsc.unwrap_or(0.0));
            e.1.push(row.centroid_error);
            e.2 += usize::from(row.miss);
        }
    }
    by.into_iter()
        .map(|(k, (d, c, m))| {
            Ok((
                k,
                RegionSummary {
                    dsc: summarize(&d, m, resamples, seed)?,
                    centroid_error: summarize(&c, m, resamples, seed)?,
                },
            ))
        })
        .collect()
}

pub mod fixtures {
    //! A self-contained synthetic case: templates, a posed scan with
    //! ground truth, embeddings, crowns, an antagonist and a config.

    use super::*;
    use crate::fdi::Jaw;
    use crate::synth::arch::{generate_arch, ArchSpec};
    use crate::synth::crown::{generate_crown_fixture, CrownDims, CrownKind};
    use crate::synth::embed::{all_fdi, crown_template_id, prototypes, synthetic_index, synthetic_query};
    use crate::synth::perturb::{perturb_pose, PerturbSpec};
    use crate::synth::shapes::cuboid;

    pub const TARGET_FDI: u8 = 36;
    pub const SCAN_GRID: f64 = 0.4;
    /// Antagonist overlap with the tallest cusp of the fitted crown (mm).
    pub const ANTAGONIST_OVERLAP: f64 = 0.15;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct FixtureManifest {
        pub version: u32,
        pub seed: u64,
        pub target_fdi: u8,
        pub scan: String,
        pub labels: String,
        pub context: String,
        pub config: String,
        pub antagonist: String,
        pub applied_transform: RigidTransform,
    }

    fn crown_dims(fdi: Fdi) -> CrownDims {
        if fdi.is_posterior() {
            CrownDims {
                mesiodistal: 10.0,
                buccolingual: 10.0,
                height: 6.0,
                grid: 0.25,
            }
        } else {
            CrownDims {
                mesiodistal: 7.0,
                buccolingual: 6.5,
                height: 7.0,
                grid: 0.25,
            }
        }
    }

    /// Writes the case to `dir` and returns its manifest. The antagonist is
    /// a plate placed over the crown that a dry run without antagonist
    /// produces, so it overlaps the tallest cusp by [`ANTAGONIST_OVERLAP`].
    pub fn generate_fixtures(dir: &Path, seed: u64) -> Result<FixtureManifest> {
        std::fs::create_dir_all(dir)?;
        let target = Fdi::new(TARGET_FDI)?;

        let (upper, _) = generate_arch(&ArchSpec::full(Jaw::Upper, seed.wrapping_add(100)))?;
        let (lower, _) = generate_arch(&ArchSpec::full(Jaw::Lower, seed.wrapping_add(101)))?;
        TemplateLibrary::from_masters(upper, lower)?.save(&dir.join("templates"))?;

        let spec = ArchSpec::full(target.jaw(), seed).with_grid(SCAN_GRID).prepare(target)?;
        let (arch, _) = generate_arch(&spec)?;
        let (posed, applied) = perturb_pose(&arch, &PerturbSpec::wide(seed))?;
        let labels = posed.face_labels.clone().expect("generated arches are labeled");
        let mut scan = posed;
        scan.face_labels = None;
        save_mesh(&scan, &dir.join("scan.ply"), MeshFormat::Ply)?;
        save_labels(&dir.join("scan.labels.json"), &labels)?;

        let protos = prototypes(seed);
        let levels: Vec<f64> = (0..10).map(|j| 0.2 + 0.08 * j as f64).collect();
        let index = synthetic_index(&protos, &levels, 0.3, seed.wrapping_add(1))?;
        index.save(&dir.join("embeddings.bin"))?;
        ContextFile::from_query(&synthetic_query(&protos, target, 0.25, seed.wrapping_add(2))?).save(&dir.join("scan.context.json"))?;

        let crowns = dir.join("crowns");
        std::fs::create_dir_all(&crowns)?;
        for fdi in all_fdi() {
            let kind = if fdi.is_posterior() {
                CrownKind::BumpedPosterior
            } else {
                CrownKind::SmoothAnterior
            };
            let c = generate_crown_fixture(kind, crown_dims(fdi))?;
            save_mesh(&c.template.mesh, &crowns.join(format!("{}.ply", crown_template_id(fdi))), MeshFormat::Ply)?;
        }

        let mut config = PipelineConfig {
            seed,
            output_dir: PathBuf::from("out"),
            paths: Paths {
                templates: "templates".into(),
                embeddings: "embeddings.bin".into(),
                crowns: "crowns".into(),
                ..Paths::default()
            },
            ..PipelineConfig::default()
        };

        // Dry run without an antagonist to find where the crown ends up.
        let mut dry = config.clone();
        dry.output_dir = PathBuf::from("calibration");
        dry.resolve_paths(dir);
        run_pipeline(&dir.join("scan.ply"), TARGET_FDI, &dry, None)?;
        let fitted = load_mesh(&dir.join("calibration").join("fitted_crown.ply"), MeshFormat::Ply)?;
        std::fs::remove_dir_all(dir.join("calibration"))?;
        let antagonist = antagonist_plate(&fitted, target.jaw())?;
        save_mesh(&antagonist, &dir.join("antagonist.ply"), MeshFormat::Ply)?;

        config.paths.antagonist = Some("antagonist.ply".into());
        std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
        let manifest = FixtureManifest {
            version: 1,
            seed,
            target_fdi: TARGET_FDI,
            scan: "scan.ply".into(),
            labels: "scan.labels.json".into(),
            context: "scan.context.json".into(),
            config: "config.toml".into(),
            antagonist: "antagonist.ply".into(),
            applied_transform: applied.transform,
        };
        std::fs::write(dir.join("fixtures.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }

    /// Slab over the crown's footprint whose lower face sits just below the
    /// crown's highest point along the occlusal direction.
    pub fn antagonist_plate(crown: &LabeledMesh, jaw: Jaw) -> Result<LabeledMesh> {
        let (lo, hi) = crown
            .bounding_box()
            .ok_or_else(|| Error::InvalidArgument("empty crown".into()))?;
        let m = 3.0;
        let (x0, x1, y0, y1) = (lo.x - m, hi.x + m, lo.y - m, hi.y + m);
        Ok(match jaw {
            Jaw::Lower => {
                let z = hi.z - ANTAGONIST_OVERLAP;
                cuboid([x0, y0, z], [x1, y1, z + 4.0])
            }
            Jaw::Upper => {
                let z = lo.z + ANTAGONIST_OVERLAP;
                cuboid([x0, y0, z - 4.0], [x1, y1, z])
            }
        })
    }
}
