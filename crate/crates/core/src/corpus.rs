//! Gallery/probe manifests for closed-set watchlist identification.
//!
//! A manifest is a CSV file with the fixed header [`MANIFEST_HEADER`]. Box
//! and landmark column groups are all-or-nothing per row.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::FaceBox;

pub const MANIFEST_HEADER: [&str; 19] = [
    "image_id",
    "subject_id",
    "role",
    "condition",
    "path",
    "box_x",
    "box_y",
    "box_w",
    "box_h",
    "lm1x",
    "lm1y",
    "lm2x",
    "lm2y",
    "lm3x",
    "lm3y",
    "lm4x",
    "lm4y",
    "lm5x",
    "lm5y",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("subject {0} has more than one gallery record")]
    DuplicateGallery(String),
    #[error("probe {image_id} belongs to subject {subject_id}, which has no gallery record")]
    UnknownProbeSubject { image_id: String, subject_id: String },
    #[error("image id {0} appears more than once")]
    DuplicateImageId(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Gallery,
    Probe,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Gallery => "gallery",
            Role::Probe => "probe",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gallery" => Ok(Role::Gallery),
            "probe" => Ok(Role::Probe),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// Five facial landmarks in pixel coordinates: eye centers, nose tip,
/// mouth corners.
pub type Landmarks = [(f64, f64); 5];

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub subject_id: String,
    pub role: Role,
    pub condition: String,
    pub path: PathBuf,
    pub face_box: Option<FaceBox<f64>>,
    pub landmarks: Option<Landmarks>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    /// Check every manifest invariant.
    pub fn new(name: impl Into<String>, records: Vec<ImageRecord>) -> Result<Self, CorpusError> {
        let mut ids = HashSet::new();
        let mut gallery = HashSet::new();
        for r in &records {
            if !ids.insert(r.image_id.as_str()) {
                return Err(CorpusError::DuplicateImageId(r.image_id.clone()));
            }
            if r.role == Role::Gallery && !gallery.insert(r.subject_id.as_str()) {
                return Err(CorpusError::DuplicateGallery(r.subject_id.clone()));
            }
        }
        if let Some(r) = records.iter().find(|r| r.role == Role::Probe && !gallery.contains(r.subject_id.as_str())) {
            return Err(CorpusError::UnknownProbeSubject {
                image_id: r.image_id.clone(),
                subject_id: r.subject_id.clone(),
            });
        }
        Ok(Self { name: name.into(), records })
    }

    pub fn gallery(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.role == Role::Gallery)
    }

    pub fn probes(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.role == Role::Probe)
    }

    pub fn conditions(&self) -> BTreeSet<&str> {
        self.probes().map(|r| r.condition.as_str()).collect()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Keep only records whose subject is in `subjects`.
    pub fn restrict(&self, subjects: &BTreeSet<&str>) -> Manifest {
        Manifest {
            name: self.name.clone(),
            records: self.records.iter().filter(|r| subjects.contains(r.subject_id.as_str())).cloned().collect(),
        }
    }
}

/// Probe records grouped by condition tag. Gallery records are excluded.
pub fn partition_by_condition(m: &Manifest) -> BTreeMap<&str, Vec<&ImageRecord>> {
    let mut parts: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in m.probes() {
        parts.entry(r.condition.as_str()).or_default().push(r);
    }
    parts
}

/// Sorted, deduplicated subject ids over all records.
pub fn subject_ids(m: &Manifest) -> Vec<&str> {
    let set: BTreeSet<&str> = m.records.iter().map(|r| r.subject_id.as_str()).collect();
    set.into_iter().collect()
}

fn parse_f64(field: &str, column: &str, line: u64) -> Result<f64, CorpusError> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CorpusError::Parse { line, message: format!("column {column}: bad number {field:?}") })
}

/// Parse an optional all-or-nothing group of numeric columns.
fn parse_group(fields: &[&str], columns: &[&str], line: u64) -> Result<Option<Vec<f64>>, CorpusError> {
    let empty = fields.iter().filter(|f| f.is_empty()).count();
    if empty == fields.len() {
        return Ok(None);
    }
    if empty != 0 {
        return Err(CorpusError::Parse {
            line,
            message: format!("columns {}..{} must be all empty or all set", columns[0], columns[columns.len() - 1]),
        });
    }
    fields.iter().zip(columns).map(|(f, c)| parse_f64(f, c, line)).collect::<Result<Vec<_>, _>>().map(Some)
}

fn parse_row(row: &csv::StringRecord, line: u64) -> Result<ImageRecord, CorpusError> {
    if row.len() != MANIFEST_HEADER.len() {
        return Err(CorpusError::Parse { line, message: format!("expected 19 fields, found {}", row.len()) });
    }
    let f: Vec<&str> = row.iter().collect();
    let image_id = f[0].to_string();
    if image_id.is_empty() {
        return Err(CorpusError::Parse { line, message: "empty image_id".into() });
    }
    let role = f[2].parse::<Role>().map_err(|message| CorpusError::Parse { line, message })?;
    let face_box = match parse_group(&f[5..9], &MANIFEST_HEADER[5..9], line)? {
        None => None,
        Some(v) => Some(
            FaceBox::new(v[0], v[1], v[2], v[3]).map_err(|e| CorpusError::Parse { line, message: e.to_string() })?,
        ),
    };
    let landmarks = parse_group(&f[9..19], &MANIFEST_HEADER[9..19], line)?.map(|v| {
        let mut lm = [(0.0, 0.0); 5];
        for (i, p) in lm.iter_mut().enumerate() {
            *p = (v[2 * i], v[2 * i + 1]);
        }
        lm
    });
    Ok(ImageRecord {
        image_id,
        subject_id: f[1].to_string(),
        role,
        condition: f[3].to_string(),
        path: PathBuf::from(f[4]),
        face_box,
        landmarks,
    })
}

/// Parse and validate a manifest from any reader.
pub fn read_manifest(reader: impl Read, name: impl Into<String>) -> Result<Manifest, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(CorpusError::Parse {
            line: 1,
            message: format!("header must be exactly {}", MANIFEST_HEADER.join(",")),
        });
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        records.push(parse_row(&row, line)?);
    }
    Manifest::new(name, records)
}

/// Load a manifest file. The manifest name is the file stem.
pub fn load_manifest(path: &Path) -> Result<Manifest, CorpusError> {
    let file =
        std::fs::File::open(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_manifest(std::io::BufReader::new(file), name)
}

fn push_num(row: &mut Vec<String>, v: f64) {
    // Display for f64 is the shortest representation that parses back exactly.
    row.push(format!("{v}"));
}

pub fn write_manifest_to(m: &Manifest, writer: impl Write) -> Result<(), CorpusError> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    wtr.write_record(MANIFEST_HEADER)?;
    for r in &m.records {
        let mut row = vec![
            r.image_id.clone(),
            r.subject_id.clone(),
            r.role.to_string(),
            r.condition.clone(),
            r.path.to_string_lossy().into_owned(),
        ];
        match &r.face_box {
            Some(b) => [b.x, b.y, b.w, b.h].into_iter().for_each(|v| push_num(&mut row, v)),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        match &r.landmarks {
            Some(lm) => lm.iter().for_each(|&(x, y)| {
                push_num(&mut row, x);
                push_num(&mut row, y);
            }),
            None => row.extend(std::iter::repeat_n(String::new(), 10)),
        }
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|source| CorpusError::Io { path: "<writer>".into(), source })?;
    Ok(())
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<(), CorpusError> {
    let file =
        std::fs::File::create(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    write_manifest_to(m, std::io::BufWriter::new(file))
}
