//! Stage composition: crop, resize, gallery resolution matching, embedding,
//! matching and evaluation, plus the crop-ratio x resolution sweep.
//!
//! Every stage used here is the same function the CLI subcommands call, so
//! a sweep cell equals the corresponding chain of single runs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{ImageRecord, Manifest, Role};
use crate::embedding::{embed_checked, Embedder, Embedding, EmbeddingError, EmbeddingSet};
use crate::eval::{evaluate, EvalError, EvalReport, SweepCell, SweepGrid};
use crate::geometry::{crop_window, extend_box, CropWindow, GeometryError};
use crate::imaging::{input_kernel, match_resolution, resize, ImageBuffer, ImagingError, MatchWarning};
use crate::matcher::{build_gallery, identify_all, BatchIdentification, MatchError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("record {0} has no face box")]
    MissingBox(String),
    #[error("no image available for {0}")]
    MissingImage(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Where a record's failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Load,
    Prepare,
    Match,
    Embed,
    Identify,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Prepare => "prepare",
            Stage::Match => "matchres",
            Stage::Embed => "embed",
            Stage::Identify => "identify",
        }
    }
}

/// A per-record failure. Failed records are skipped, never fatal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageFailure {
    pub image_id: String,
    pub stage: Stage,
    pub message: String,
}

impl StageFailure {
    pub fn new(image_id: &str, stage: Stage, err: impl std::fmt::Display) -> Self {
        Self { image_id: image_id.to_string(), stage, message: err.to_string() }
    }
}

/// Writes `image_id,stage,error` rows.
pub fn write_failures_csv(failures: &[StageFailure], w: impl std::io::Write) -> std::io::Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wtr.write_record(["image_id", "stage", "error"])?;
    for f in failures {
        wtr.write_record([f.image_id.as_str(), f.stage.as_str(), f.message.as_str()])?;
    }
    wtr.flush()
}

pub trait ImageSource: Send + Sync {
    fn load(&self, record: &ImageRecord) -> Result<ImageBuffer, PipelineError>;
}

/// Reads record paths from disk; relative paths resolve against `root`.
#[derive(Debug, Clone)]
pub struct FsImageSource {
    root: PathBuf,
}

impl FsImageSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Resolve relative record paths against the manifest's directory.
    pub fn for_manifest(manifest_path: &Path) -> Self {
        Self::new(manifest_path.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }
}

impl ImageSource for FsImageSource {
    fn load(&self, record: &ImageRecord) -> Result<ImageBuffer, PipelineError> {
        Ok(ImageBuffer::open(&self.resolve(record))?)
    }
}

/// Decoded images keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct MemoryImageSource {
    images: HashMap<String, ImageBuffer>,
}

impl MemoryImageSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, image: ImageBuffer) {
        self.images.insert(image_id.into(), image);
    }

    /// Decode every record of `manifest` once. Unreadable images are
    /// reported and left out.
    pub fn preload(manifest: &Manifest, source: &dyn ImageSource) -> (Self, Vec<StageFailure>) {
        let loaded: Vec<_> = manifest.records.par_iter().map(|r| (r, source.load(r))).collect();
        let mut mem = Self::new();
        let mut failures = Vec::new();
        for (r, img) in loaded {
            match img {
                Ok(img) => mem.insert(r.image_id.clone(), img),
                Err(e) => failures.push(StageFailure::new(&r.image_id, Stage::Load, e)),
            }
        }
        (mem, failures)
    }
}

impl ImageSource for MemoryImageSource {
    fn load(&self, record: &ImageRecord) -> Result<ImageBuffer, PipelineError> {
        self.images.get(&record.image_id).cloned().ok_or_else(|| PipelineError::MissingImage(record.image_id.clone()))
    }
}

/// Geometry of one prepared face: where it was cut from and how it was
/// scaled, so landmarks can follow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prepared {
    pub window: CropWindow,
    pub scale_x: f64,
    pub scale_y: f64,
}

/// Extend the record's box by `crop_ratio`, cut it out with edge padding
/// and bring it to `input_size` x `input_size` (area when shrinking,
/// bicubic otherwise). `input_size = None` keeps the crop size.
pub fn prepare_face(
    img: &ImageBuffer,
    record: &ImageRecord,
    crop_ratio: f64,
    input_size: Option<u32>,
) -> Result<(ImageBuffer, Prepared), PipelineError> {
    let face_box = record.face_box.as_ref().ok_or_else(|| PipelineError::MissingBox(record.image_id.clone()))?;
    let extended = extend_box(face_box, crop_ratio)?;
    let window = CropWindow::from_box(&extended)?;
    let crop = crop_window(img, &window);
    let (out_w, out_h) = input_size.map_or((crop.width(), crop.height()), |s| (s, s));
    let kernel = input_kernel(crop.width(), crop.height(), out_w, out_h);
    let out = resize(&crop, out_w, out_h, kernel)?;
    let prepared =
        Prepared { window, scale_x: out_w as f64 / window.w as f64, scale_y: out_h as f64 / window.h as f64 };
    Ok((out, prepared))
}

/// Resolution matching for gallery images; probes and `resolution = None`
/// pass through unchanged.
pub fn match_gallery(
    img: ImageBuffer,
    role: Role,
    resolution: Option<u32>,
    input_size: Option<u32>,
) -> Result<(ImageBuffer, Option<MatchWarning>), PipelineError> {
    match (role, resolution) {
        (Role::Gallery, Some(target)) => {
            let size = input_size.unwrap_or(img.width());
            let m = match_resolution(&img, target, size)?;
            Ok((m.image, m.warning))
        }
        _ => Ok((img, None)),
    }
}

/// Parameters of one evaluation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub crop_ratio: f64,
    /// Gallery bottleneck resolution; `None` skips resolution matching.
    pub resolution: Option<u32>,
    /// Model input side; `None` keeps crop dimensions.
    pub input_size: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub gallery: EmbeddingSet,
    pub probes: EmbeddingSet,
    pub failures: Vec<StageFailure>,
    pub warnings: Vec<(String, MatchWarning)>,
}

fn embed_record(
    record: &ImageRecord,
    source: &dyn ImageSource,
    backend: &dyn Embedder,
    config: &RunConfig,
) -> Result<(Vec<f32>, Option<MatchWarning>), StageFailure> {
    let id = record.image_id.as_str();
    if !backend.needs_image() {
        let v = embed_checked(backend, id, None).map_err(|e| StageFailure::new(id, Stage::Embed, e))?;
        return Ok((v, None));
    }
    let img = source.load(record).map_err(|e| StageFailure::new(id, Stage::Load, e))?;
    let (face, prepared) = prepare_face(&img, record, config.crop_ratio, config.input_size)
        .map_err(|e| StageFailure::new(id, Stage::Prepare, e))?;
    let (face, warning) = match_gallery(face, record.role, config.resolution, config.input_size)
        .map_err(|e| StageFailure::new(id, Stage::Match, e))?;
    // the crop was already resampled to the input size, so judge the
    // bottleneck against the resolution the crop actually had
    let warning = match (record.role, config.resolution) {
        (Role::Gallery, Some(target)) if target > prepared.window.w.min(prepared.window.h) => {
            Some(MatchWarning::UpscaleAsMatch {
                target,
                source_width: prepared.window.w,
                source_height: prepared.window.h,
            })
        }
        _ => warning,
    };
    let v = embed_checked(backend, id, Some(&face)).map_err(|e| StageFailure::new(id, Stage::Embed, e))?;
    Ok((v, warning))
}

/// Embed every gallery and probe record. Record order is preserved and
/// the output does not depend on the size of the rayon pool.
pub fn embed_manifest(
    manifest: &Manifest,
    source: &dyn ImageSource,
    backend: &dyn Embedder,
    config: &RunConfig,
) -> EmbedOutcome {
    let outcomes: Vec<_> = manifest.records.par_iter().map(|r| (r, embed_record(r, source, backend, config))).collect();
    let descriptor = backend.descriptor().clone();
    let dim = descriptor.dim;
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    for (r, outcome) in outcomes {
        match outcome {
            Ok((vector, warning)) => {
                if let Some(w) = warning {
                    log::debug!("{}: {w}", r.image_id);
                    warnings.push((r.image_id.clone(), w));
                }
                let e = Embedding { image_id: r.image_id.clone(), subject_id: r.subject_id.clone(), vector };
                match r.role {
                    Role::Gallery => gallery.push(e),
                    Role::Probe => probes.push(e),
                }
            }
            Err(f) => failures.push(f),
        }
    }
    // embed_checked already enforced dim and finiteness; ids are unique per manifest
    EmbedOutcome {
        gallery: EmbeddingSet::new(dim, descriptor.clone(), gallery).expect("validated embeddings"),
        probes: EmbeddingSet::new(dim, descriptor, probes).expect("validated embeddings"),
        failures,
        warnings,
    }
}

/// Identify probes against the gallery; matcher failures become
/// `Identify` stage failures.
pub fn identify_sets(
    gallery: &EmbeddingSet,
    probes: &EmbeddingSet,
) -> Result<(BatchIdentification, Vec<StageFailure>), PipelineError> {
    let index = build_gallery(gallery)?;
    let batch = identify_all(&probes.entries, &index);
    let failures = batch.failures.iter().map(|f| StageFailure::new(&f.image_id, Stage::Identify, &f.error)).collect();
    Ok((batch, failures))
}

#[derive(Debug, Clone)]
pub struct SingleRun {
    pub report: EvalReport,
    pub batch: BatchIdentification,
    pub failures: Vec<StageFailure>,
}

/// embed -> identify -> evaluate for one configuration.
pub fn run_single(
    manifest: &Manifest,
    source: &dyn ImageSource,
    backend: &dyn Embedder,
    config: &RunConfig,
    ranks: &[usize],
) -> Result<SingleRun, PipelineError> {
    let embedded = embed_manifest(manifest, source, backend, config);
    let mut failures = embedded.failures;
    let (batch, identify_failures) = identify_sets(&embedded.gallery, &embedded.probes)?;
    failures.extend(identify_failures);
    let report = evaluate(manifest, &batch.results, ranks)?;
    Ok(SingleRun { report, batch, failures })
}

/// Rank-1 rates over the crop ratio x gallery resolution grid. Images are
/// decoded once; cells run in parallel and a failing cell is recorded
/// without stopping the sweep.
pub fn sweep(
    manifest: &Manifest,
    source: &dyn ImageSource,
    backend: Arc<dyn Embedder>,
    crop_ratios: &[f64],
    resolutions: &[u32],
    input_size: Option<u32>,
) -> (SweepGrid, Vec<StageFailure>) {
    let (images, load_failures) = if backend.needs_image() {
        MemoryImageSource::preload(manifest, source)
    } else {
        (MemoryImageSource::new(), Vec::new())
    };
    let conditions: Vec<String> = manifest.conditions().into_iter().map(String::from).collect();
    let axes: Vec<(f64, u32)> = crop_ratios.iter().flat_map(|&r| resolutions.iter().map(move |&t| (r, t))).collect();
    let per_axis: Vec<Vec<SweepCell>> = axes
        .par_iter()
        .map(|&(crop_ratio, resolution)| {
            let config = RunConfig { crop_ratio, resolution: Some(resolution), input_size };
            let outcome = run_single(manifest, &images, backend.as_ref(), &config, &[1]);
            conditions
                .iter()
                .map(|cond| {
                    let (rank1_ir, error) = match &outcome {
                        Ok(run) => match run.report.conditions.get(cond).and_then(|c| c.rank_k_ir.get(&1)) {
                            Some(&v) => (Some(v), None),
                            None => (None, Some(format!("no identified probes for condition {cond}"))),
                        },
                        Err(e) => (None, Some(e.to_string())),
                    };
                    SweepCell { crop_ratio, resolution, condition: cond.clone(), rank1_ir, error }
                })
                .collect()
        })
        .collect();
    let grid = SweepGrid {
        crop_ratios: crop_ratios.to_vec(),
        resolutions: resolutions.to_vec(),
        conditions,
        cells: per_axis.into_iter().flatten().collect(),
    };
    (grid, load_failures)
}
