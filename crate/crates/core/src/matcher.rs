//! Brute-force nearest-neighbor identification under correlation distance.
//!
//! `d(u, v) = 1 - <u - mean(u), v - mean(v)> / (|u - mean(u)| |v - mean(v)|)`
//!
//! All accumulation happens in `f64` regardless of the input scalar type.

use std::io::{Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::embedding::{Embedding, EmbeddingSet};
use crate::report::{format_significant, write_provenance, Provenance};
use crate::scalar::Scalar;

pub const RESULTS_HEADER: [&str; 5] = ["probe_image_id", "true_subject_id", "rank", "subject_id", "distance"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("degenerate (zero-variance) embedding {0}")]
    DegenerateEmbedding(String),
    #[error("subject {0} appears more than once in the gallery")]
    DuplicateSubject(String),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("malformed results file: {0}")]
    Malformed(String),
}

/// A mean-centered vector and its squared Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Centered {
    values: Vec<f64>,
    norm_sq: f64,
}

impl Centered {
    /// Center `v`. Constant vectors (including those shorter than 2) are
    /// rejected: their correlation with anything is undefined.
    pub fn new<T: Scalar>(v: &[T], id: &str) -> Result<Self, MatchError> {
        let degenerate = || MatchError::DegenerateEmbedding(id.to_string());
        let first = *v.first().ok_or_else(degenerate)?;
        if v.iter().all(|&x| x == first) {
            return Err(degenerate());
        }
        let mean = v.iter().map(|x| x.widen()).sum::<f64>() / v.len() as f64;
        let values: Vec<f64> = v.iter().map(|x| x.widen() - mean).collect();
        let norm_sq = values.iter().map(|x| x * x).sum::<f64>();
        if norm_sq <= 0.0 || !norm_sq.is_finite() {
            return Err(degenerate());
        }
        Ok(Self { values, norm_sq })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq.sqrt()
    }

    /// Correlation distance to another centered vector, clamped to `[0, 2]`.
    ///
    /// A single square root of the product of squared norms keeps
    /// self-matches and exact multiples at exactly 0 (or 2).
    pub fn distance(&self, other: &Centered) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        (1.0 - dot / (self.norm_sq * other.norm_sq).sqrt()).clamp(0.0, 2.0)
    }
}

pub fn correlation_distance<T: Scalar>(u: &[T], v: &[T]) -> Result<f64, MatchError> {
    if u.len() != v.len() {
        return Err(MatchError::DimMismatch { expected: u.len(), found: v.len() });
    }
    let cu = Centered::new(u, "u")?;
    let cv = Centered::new(v, "v")?;
    Ok(cu.distance(&cv))
}

#[derive(Debug, Clone)]
pub struct GalleryEntry {
    pub subject_id: String,
    pub centered: Centered,
}

/// Precomputed gallery, one entry per subject in lexicographic order.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    dim: usize,
    entries: Vec<GalleryEntry>,
}

impl GalleryIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn subject_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.subject_id.as_str())
    }
}

pub fn build_gallery<T: Scalar>(set: &EmbeddingSet<T>) -> Result<GalleryIndex, MatchError> {
    build_gallery_from(set.dim, &set.entries)
}

pub fn build_gallery_from<T: Scalar>(dim: usize, embeddings: &[Embedding<T>]) -> Result<GalleryIndex, MatchError> {
    if embeddings.is_empty() {
        return Err(MatchError::EmptyGallery);
    }
    let mut entries = embeddings
        .iter()
        .map(|e| {
            if e.vector.len() != dim {
                return Err(MatchError::DimMismatch { expected: dim, found: e.vector.len() });
            }
            Ok(GalleryEntry { subject_id: e.subject_id.clone(), centered: Centered::new(&e.vector, &e.subject_id)? })
        })
        .collect::<Result<Vec<_>, _>>()?;
    entries.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    if let Some(w) = entries.windows(2).find(|w| w[0].subject_id == w[1].subject_id) {
        return Err(MatchError::DuplicateSubject(w[0].subject_id.clone()));
    }
    Ok(GalleryIndex { dim, entries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedMatch {
    pub subject_id: String,
    pub distance: f64,
}

/// Full gallery ranking for one probe, ascending by distance then subject id.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationResult {
    pub probe_image_id: String,
    pub true_subject_id: String,
    pub ranked: Vec<RankedMatch>,
}

impl IdentificationResult {
    /// 1-based rank of the true subject, if it is enrolled.
    pub fn true_rank(&self) -> Option<usize> {
        self.ranked.iter().position(|m| m.subject_id == self.true_subject_id).map(|p| p + 1)
    }

    pub fn decision(&self) -> Option<&str> {
        self.ranked.first().map(|m| m.subject_id.as_str())
    }
}

pub fn identify<T: Scalar>(probe: &Embedding<T>, gallery: &GalleryIndex) -> Result<IdentificationResult, MatchError> {
    if probe.vector.len() != gallery.dim {
        return Err(MatchError::DimMismatch { expected: gallery.dim, found: probe.vector.len() });
    }
    let centered = Centered::new(&probe.vector, &probe.image_id)?;
    let mut ranked: Vec<RankedMatch> = gallery
        .entries
        .iter()
        .map(|g| RankedMatch { subject_id: g.subject_id.clone(), distance: centered.distance(&g.centered) })
        .collect();
    // stable: equal distances keep the gallery's lexicographic order
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    Ok(IdentificationResult {
        probe_image_id: probe.image_id.clone(),
        true_subject_id: probe.subject_id.clone(),
        ranked,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFailure {
    pub image_id: String,
    pub subject_id: String,
    pub error: MatchError,
}

#[derive(Debug, Clone, Default)]
pub struct BatchIdentification {
    pub results: Vec<IdentificationResult>,
    pub failures: Vec<ProbeFailure>,
}

/// Identify every probe, in parallel on the current rayon pool. Results
/// keep probe input order; failing probes are reported, not fatal.
pub fn identify_all<T: Scalar>(probes: &[Embedding<T>], gallery: &GalleryIndex) -> BatchIdentification {
    let outcomes: Vec<_> = probes.par_iter().map(|p| identify(p, gallery)).collect();
    let mut batch = BatchIdentification::default();
    for (probe, outcome) in probes.iter().zip(outcomes) {
        match outcome {
            Ok(r) => batch.results.push(r),
            Err(error) => batch.failures.push(ProbeFailure {
                image_id: probe.image_id.clone(),
                subject_id: probe.subject_id.clone(),
                error,
            }),
        }
    }
    batch
}

pub fn write_results(
    results: &[IdentificationResult],
    provenance: Option<&Provenance>,
    mut writer: impl Write,
) -> std::io::Result<()> {
    if let Some(p) = provenance {
        write_provenance(&mut writer, p)?;
    }
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    wtr.write_record(RESULTS_HEADER)?;
    for r in results {
        for (rank, m) in r.ranked.iter().enumerate() {
            wtr.write_record([
                r.probe_image_id.as_str(),
                r.true_subject_id.as_str(),
                &(rank + 1).to_string(),
                m.subject_id.as_str(),
                &format_significant(m.distance, 9),
            ])?;
        }
    }
    wtr.flush()
}

/// Parse a results CSV back into rankings. `#` lines are provenance and
/// skipped. Rows for one probe must be contiguous with ranks 1, 2, ...
pub fn read_results(reader: impl Read) -> Result<Vec<IdentificationResult>, MatchError> {
    let bad = |m: String| MatchError::Malformed(m);
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(RESULTS_HEADER.iter().copied()) {
        return Err(bad(format!("header must be {}", RESULTS_HEADER.join(","))));
    }
    let mut out: Vec<IdentificationResult> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let rank: usize = row[2].parse().map_err(|_| bad(format!("bad rank {:?}", &row[2])))?;
        let distance: f64 = row[4].parse().map_err(|_| bad(format!("bad distance {:?}", &row[4])))?;
        let m = RankedMatch { subject_id: row[3].to_string(), distance };
        match out.last_mut() {
            Some(last) if last.probe_image_id == row[0] => {
                if rank != last.ranked.len() + 1 || last.true_subject_id != row[1] {
                    return Err(bad(format!("out-of-order row for probe {}", &row[0])));
                }
                last.ranked.push(m);
            }
            _ => {
                if rank != 1 {
                    return Err(bad(format!("probe {} does not start at rank 1", &row[0])));
                }
                out.push(IdentificationResult {
                    probe_image_id: row[0].to_string(),
                    true_subject_id: row[1].to_string(),
                    ranked: vec![m],
                });
            }
        }
    }
    Ok(out)
}
