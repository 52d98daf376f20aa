//! `lrfr` command-line front end.
//!
//! Every subcommand reads its inputs, runs one stage chain from
//! `lrfr_core`, and writes all artifacts under `--out`. Reports start with
//! `#` provenance lines (toolkit version, config hash, seed).

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use lrfr_core::corpus::{load_manifest, write_manifest, CorpusError, ImageRecord, Manifest};
use lrfr_core::embedding::{read_embeddings, resolve_backend, write_embeddings, BackendRegistry, EmbeddingError};
use lrfr_core::eval::{evaluate, rrssv_from_results, write_eval_csv, write_rrssv_csv, write_sweep_csv, EvalError};
use lrfr_core::geometry::{FaceBox, CROP_RATIOS};
use lrfr_core::imaging::ImagingError;
use lrfr_core::matcher::{read_results, write_results, MatchError};
use lrfr_core::pipeline::{
    embed_manifest, identify_sets, match_gallery, prepare_face, sweep, write_failures_csv, FsImageSource, ImageSource,
    PipelineError, RunConfig, Stage, StageFailure,
};
use lrfr_core::report::Provenance;
use lrfr_core::synthetic::{generate, SyntheticError, SyntheticSpec};
use lrfr_core::MATCH_RESOLUTIONS;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error("{count} item(s) failed; details in {}", report.display())]
    ItemFailures { count: usize, report: PathBuf },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Corpus(_) => "corpus",
            CliError::Embedding(_) => "embedding",
            CliError::Imaging(_) => "imaging",
            CliError::Match(_) => "matcher",
            CliError::Eval(_) => "eval",
            CliError::Pipeline(_) => "pipeline",
            CliError::Synthetic(_) => "synthetic",
            CliError::ItemFailures { .. } => "items",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Parser)]
#[command(name = "lrfr", version, about = "Low-resolution face identification toolkit")]
pub struct Cli {
    /// Worker threads for data-parallel stages (0 = all cores). Results do
    /// not depend on this value.
    #[arg(long, global = true, env = "LRFR_JOBS", default_value_t = 0)]
    pub jobs: usize,

    /// TOML file of flag values; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop faces with an extended box and resize them to the model input.
    Prepare(PrepareArgs),
    /// Degrade gallery faces to a bottleneck resolution and back.
    Matchres(MatchresArgs),
    /// Embed gallery and probe faces into embedding files.
    Embed(EmbedArgs),
    /// Rank every probe against the gallery.
    Identify(IdentifyArgs),
    /// Rank-k identification rates per condition.
    Evaluate(EvaluateArgs),
    /// Repeated random sub-sampling over subjects.
    Rrssv(RrssvArgs),
    /// Crop ratio x gallery resolution grid of Rank-1 rates.
    Sweep(SweepArgs),
    /// Write a seeded synthetic corpus (images + manifest).
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub crop_ratio: f64,
    #[arg(long)]
    pub input_size: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchresArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Bottleneck side; omit to pass images through unchanged.
    #[arg(long)]
    pub resolution: Option<u32>,
    /// Output side; defaults to the gallery image width.
    #[arg(long)]
    pub input_size: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `reference` or `file:<path>`.
    #[arg(long, default_value = "reference")]
    pub backend: String,
    #[arg(long, default_value_t = 1.0)]
    pub crop_ratio: f64,
    #[arg(long)]
    pub resolution: Option<u32>,
    #[arg(long)]
    pub input_size: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub probes: PathBuf,
    /// Results CSV; per-probe errors go next to it as `<stem>.errors.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub ranks: Vec<usize>,
    /// Report every rank up to the gallery size (a CMC curve).
    #[arg(long)]
    pub all_ranks: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RrssvArgs {
    /// Directory holding `results.csv` and `manifest.csv`.
    #[arg(long)]
    pub results_dir: Option<PathBuf>,
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub subset: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; defaults to `<results-dir>/rrssv.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "reference")]
    pub backend: String,
    #[arg(long, value_delimiter = ',', default_values_t = CROP_RATIOS.to_vec())]
    pub crop_ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = MATCH_RESOLUTIONS.to_vec())]
    pub resolutions: Vec<u32>,
    #[arg(long, default_value_t = 112)]
    pub input_size: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    #[arg(long, default_value_t = 2)]
    pub probes_per_condition: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `argv` (including the program name), run the subcommand and
/// return the process exit code. Failures print one
/// `error<TAB>kind=<kind><TAB>message=<text>` line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    match parse_and_run(argv) {
        Ok(()) => 0,
        Err(Exit::Clap(e)) => {
            let _ = e.print();
            e.exit_code()
        }
        Err(Exit::Cli(e)) => {
            let msg = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("error\tkind={}\tmessage={msg}", e.kind());
            e.exit_code()
        }
    }
}

enum Exit {
    Clap(clap::Error),
    Cli(CliError),
}

impl From<CliError> for Exit {
    fn from(e: CliError) -> Self {
        Exit::Cli(e)
    }
}

fn parse_and_run(mut argv: Vec<OsString>) -> Result<(), Exit> {
    // first pass only locates --config, so required flags may still be
    // missing here and come from the file
    let mut command = Cli::command();
    let names: Vec<String> = command.get_subcommands().map(|c| c.get_name().to_string()).collect();
    for name in names {
        command = command.mut_subcommand(name, |c| c.mut_args(|a| a.required(false)));
    }
    let matches = command.try_get_matches_from_mut(argv.clone()).map_err(Exit::Clap)?;
    if let Some((name, sub)) = matches.subcommand() {
        if let Some(path) = sub.get_one::<PathBuf>("config") {
            let sub_cmd = command.find_subcommand(name).expect("parsed subcommand exists");
            argv.extend(config::config_args(path, name, sub_cmd, sub)?);
        }
    }
    let matches = Cli::command().try_get_matches_from(argv).map_err(Exit::Clap)?;
    let cli = Cli::from_arg_matches(&matches).map_err(Exit::Clap)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let hash = config::config_hash(name, sub);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", cli.jobs)))?;
    pool.install(|| dispatch(&cli.command, &hash)).map_err(Exit::Cli)
}

fn dispatch(command: &Command, hash: &str) -> Result<(), CliError> {
    match command {
        Command::Prepare(a) => prepare(a, hash),
        Command::Matchres(a) => matchres(a, hash),
        Command::Embed(a) => embed(a, hash),
        Command::Identify(a) => identify(a, hash),
        Command::Evaluate(a) => evaluate_cmd(a, hash),
        Command::Rrssv(a) => rrssv_cmd(a, hash),
        Command::Sweep(a) => sweep_cmd(a, hash),
        Command::Synth(a) => synth(a),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(io_err(path))?;
    fs::write(path, buf).map_err(io_err(path))
}

fn write_failures(path: &Path, failures: &[StageFailure]) -> Result<(), CliError> {
    write_file(path, |w| write_failures_csv(failures, w))
}

fn write_warnings(path: &Path, warnings: &[StageFailure]) -> Result<(), CliError> {
    if !warnings.is_empty() {
        log::warn!("{} gallery image(s) upscaled by resolution matching; see {}", warnings.len(), path.display());
    }
    write_failures(path, warnings)
}

/// Write the per-item error report; any entry makes the command fail after
/// all other outputs are in place.
fn finish(path: &Path, failures: &[StageFailure]) -> Result<(), CliError> {
    write_failures(path, failures)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::ItemFailures { count: failures.len(), report: path.to_path_buf() })
    }
}

/// File name for a record's image: the id with unsafe characters replaced;
/// ids that needed rewriting get their record index appended.
fn image_file_name(record: &ImageRecord, index: usize) -> String {
    let safe: String = record
        .image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    if safe == record.image_id && !safe.starts_with('.') {
        format!("{safe}.png")
    } else {
        format!("{safe}-{index}.png")
    }
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Run `transform` on every record in parallel, save the outputs as PNG
/// under `out/images`, and write the derived manifest. Failed records keep
/// their original image path and lose their box, so later stages report
/// them instead of breaking the gallery/probe structure.
fn transform_records<F>(
    manifest: &Manifest,
    source: &FsImageSource,
    out: &Path,
    stage: Stage,
    transform: F,
) -> Result<Vec<StageFailure>, CliError>
where
    F: Fn(&ImageRecord, lrfr_core::ImageBuffer) -> Result<(lrfr_core::ImageBuffer, ImageRecord), String> + Sync,
{
    create_dir(&out.join("images"))?;
    let outcomes: Vec<Result<ImageRecord, StageFailure>> = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let img = source.load(r).map_err(|e| StageFailure::new(&r.image_id, Stage::Load, e))?;
            let (face, mut derived) = transform(r, img).map_err(|e| StageFailure::new(&r.image_id, stage, e))?;
            let rel = PathBuf::from("images").join(image_file_name(r, i));
            face.save_png(&out.join(&rel)).map_err(|e| StageFailure::new(&r.image_id, stage, e))?;
            derived.path = rel;
            derived.face_box =
                Some(FaceBox::new(0.0, 0.0, face.width() as f64, face.height() as f64).expect("images are non-empty"));
            Ok(derived)
        })
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (r, outcome) in manifest.records.iter().zip(outcomes) {
        match outcome {
            Ok(d) => records.push(d),
            Err(f) => {
                failures.push(f);
                records.push(ImageRecord {
                    path: absolute(&source.resolve(r)),
                    face_box: None,
                    landmarks: None,
                    ..r.clone()
                });
            }
        }
    }
    let derived = Manifest::new(manifest.name.clone(), records)?;
    write_manifest(&derived, &out.join("manifest.csv"))?;
    Ok(failures)
}

fn prepare(a: &PrepareArgs, _hash: &str) -> Result<(), CliError> {
    if a.crop_ratio <= 0.0 || !a.crop_ratio.is_finite() || a.input_size == 0 {
        return Err(CliError::Usage("--crop-ratio must be > 0 and --input-size >= 1".into()));
    }
    let manifest = load_manifest(&a.manifest)?;
    let source = FsImageSource::for_manifest(&a.manifest);
    let failures = transform_records(&manifest, &source, &a.out, Stage::Prepare, |r, img| {
        let (face, prep) = prepare_face(&img, r, a.crop_ratio, Some(a.input_size)).map_err(|e| e.to_string())?;
        let landmarks = r.landmarks.map(|lm| {
            lm.map(|(x, y)| ((x - prep.window.x as f64) * prep.scale_x, (y - prep.window.y as f64) * prep.scale_y))
        });
        Ok((face, ImageRecord { landmarks, ..r.clone() }))
    })?;
    finish(&a.out.join("errors.csv"), &failures)
}

fn matchres(a: &MatchresArgs, _hash: &str) -> Result<(), CliError> {
    let manifest = load_manifest(&a.manifest)?;
    let source = FsImageSource::for_manifest(&a.manifest);
    let warnings = std::sync::Mutex::new(Vec::new());
    let failures = transform_records(&manifest, &source, &a.out, Stage::Match, |r, img| {
        if r.face_box.is_none() {
            return Err(PipelineError::MissingBox(r.image_id.clone()).to_string());
        }
        let (out, warning) = match_gallery(img, r.role, a.resolution, a.input_size).map_err(|e| e.to_string())?;
        if let Some(w) = warning {
            log::debug!("{}: {w}", r.image_id);
            warnings.lock().unwrap().push(StageFailure::new(&r.image_id, Stage::Match, w));
        }
        Ok((out, ImageRecord { landmarks: None, ..r.clone() }))
    })?;
    let mut warnings = warnings.into_inner().unwrap();
    warnings.sort_by(|x, y| x.image_id.cmp(&y.image_id));
    write_warnings(&a.out.join("warnings.csv"), &warnings)?;
    finish(&a.out.join("errors.csv"), &failures)
}

fn embed(a: &EmbedArgs, _hash: &str) -> Result<(), CliError> {
    let manifest = load_manifest(&a.manifest)?;
    let backend = resolve_backend(&a.backend, &BackendRegistry::default())?;
    let source = FsImageSource::for_manifest(&a.manifest);
    let config = RunConfig { crop_ratio: a.crop_ratio, resolution: a.resolution, input_size: a.input_size };
    let outcome = embed_manifest(&manifest, &source, backend.as_ref(), &config);
    create_dir(&a.out)?;
    write_embeddings(&outcome.gallery, &a.out.join("gallery.emb"))?;
    write_embeddings(&outcome.probes, &a.out.join("probes.emb"))?;
    let warnings: Vec<StageFailure> =
        outcome.warnings.iter().map(|(id, w)| StageFailure::new(id, Stage::Match, w)).collect();
    write_warnings(&a.out.join("warnings.csv"), &warnings)?;
    finish(&a.out.join("errors.csv"), &outcome.failures)
}

fn parent_dir(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn identify(a: &IdentifyArgs, hash: &str) -> Result<(), CliError> {
    let gallery = read_embeddings(&a.gallery)?;
    let probes = read_embeddings(&a.probes)?;
    if gallery.dim != probes.dim {
        return Err(MatchError::DimMismatch { expected: gallery.dim, found: probes.dim }.into());
    }
    let (batch, failures) = identify_sets(&gallery, &probes)?;
    parent_dir(&a.out)?;
    let prov = Provenance::new(VERSION, hash, None);
    write_file(&a.out, |w| write_results(&batch.results, Some(&prov), w))?;
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "results".into());
    finish(&a.out.with_file_name(format!("{stem}.errors.csv")), &failures)
}

fn read_results_file(path: &Path) -> Result<Vec<lrfr_core::IdentificationResult>, CliError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(read_results(std::io::BufReader::new(file))?)
}

fn evaluate_cmd(a: &EvaluateArgs, hash: &str) -> Result<(), CliError> {
    let results = read_results_file(&a.results)?;
    let manifest = load_manifest(&a.manifest)?;
    let mut ranks = a.ranks.clone();
    if a.all_ranks {
        let g = results.first().map_or(0, |r| r.ranked.len());
        ranks.extend(1..=g);
    }
    ranks.sort_unstable();
    ranks.dedup();
    let report = evaluate(&manifest, &results, &ranks)?;
    parent_dir(&a.out)?;
    let prov = Provenance::new(VERSION, hash, None);
    write_file(&a.out, |w| write_eval_csv(&report, Some(&prov), w))
}

fn rrssv_cmd(a: &RrssvArgs, hash: &str) -> Result<(), CliError> {
    let pick = |explicit: &Option<PathBuf>, name: &str| -> Result<PathBuf, CliError> {
        explicit
            .clone()
            .or_else(|| a.results_dir.as_ref().map(|d| d.join(name)))
            .ok_or_else(|| CliError::Usage(format!("give --results-dir or the {name} path")))
    };
    let results_path = pick(&a.results, "results.csv")?;
    let manifest_path = pick(&a.manifest, "manifest.csv")?;
    let out = pick(&a.out, "rrssv.csv")?;
    let results = read_results_file(&results_path)?;
    let manifest = load_manifest(&manifest_path)?;
    let report = rrssv_from_results(&manifest, &results, a.subset, a.repeats, a.seed)?;
    parent_dir(&out)?;
    let prov = Provenance::new(VERSION, hash, Some(a.seed));
    write_file(&out, |w| write_rrssv_csv(&report, Some(&prov), w))
}

fn sweep_cmd(a: &SweepArgs, hash: &str) -> Result<(), CliError> {
    if a.crop_ratios.is_empty() || a.resolutions.is_empty() {
        return Err(CliError::Usage("sweep axes must be non-empty".into()));
    }
    let manifest = load_manifest(&a.manifest)?;
    let backend = resolve_backend(&a.backend, &BackendRegistry::default())?;
    let source = FsImageSource::for_manifest(&a.manifest);
    let (grid, failures) = sweep(&manifest, &source, backend, &a.crop_ratios, &a.resolutions, Some(a.input_size));
    create_dir(&a.out)?;
    let prov = Provenance::new(VERSION, hash, None).with_note("backend", &a.backend);
    write_file(&a.out.join("sweep.csv"), |w| write_sweep_csv(&grid, Some(&prov), w))?;
    finish(&a.out.join("errors.csv"), &failures)
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        subjects: a.subjects,
        probes_per_condition: a.probes_per_condition,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    generate(&spec)?.write_to_dir(&a.out)?;
    Ok(())
}
