//! Low-resolution face identification toolkit.
//!
//! Watchlist-style closed-set identification: face boxes are extended by a
//! crop ratio, gallery faces are degraded to the probe resolution, every
//! face is embedded, probes are ranked against the gallery by correlation
//! distance, and the rankings are summarised as Rank-k rates, CMC curves,
//! repeated random sub-sampling statistics and crop/resolution sweeps.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix the types used by the file formats and the CLI.

pub mod corpus;
pub mod embedding;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod matcher;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod synthetic;

pub use scalar::Scalar;

/// Face box in manifest (double precision) coordinates.
pub type FaceBox = geometry::FaceBox<f64>;
/// Embedding as stored in embedding files.
pub type Embedding = embedding::Embedding<f32>;
pub type EmbeddingSet = embedding::EmbeddingSet<f32>;

pub use corpus::{load_manifest, partition_by_condition, subject_ids, write_manifest, ImageRecord, Manifest, Role};
pub use embedding::{
    read_embeddings, reference_embed, resolve_backend, write_embeddings, BackendDescriptor, BackendRegistry, Embedder,
};
pub use eval::{cmc, evaluate, mean_std, rank_k_ir, rrssv, rrssv_from_results, EvalReport, RrssvReport, SweepGrid};
pub use geometry::{crop_padded, extend_box, CROP_RATIOS};
pub use imaging::{match_resolution, resize, to_grayscale, ImageBuffer, ResizeKernel};
pub use matcher::{build_gallery, correlation_distance, identify, identify_all, GalleryIndex, IdentificationResult};
pub use pipeline::{run_single, sweep, RunConfig};

/// Gallery bottleneck resolutions used to mimic probe image quality.
pub const MATCH_RESOLUTIONS: [u32; 5] = [24, 32, 40, 48, 64];

/// Model input sides of the supported network families.
pub const INPUT_SIZES: [u32; 2] = [112, 224];
