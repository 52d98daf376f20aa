//! Embedding vectors, the binary embedding file format and the backend
//! registry.
//!
//! File layout (little-endian, no padding):
//!
//! ```text
//! magic    8 bytes   "LRFR-EMB"
//! version  u16       1
//! dim      u32
//! count    u64
//! count x { id_len u16, id utf-8, subj_len u16, subj utf-8, dim x f32 }
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::imaging::{resize, to_grayscale, ImageBuffer, ImagingError, ResizeKernel};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"LRFR-EMB";
pub const FORMAT_VERSION: u16 = 1;
/// magic + version + dim + count
pub const HEADER_LEN: usize = 8 + 2 + 4 + 8;

/// Side length of the grid the reference embedder samples.
pub const REFERENCE_GRID: u32 = 16;
pub const REFERENCE_DIM: usize = (REFERENCE_GRID * REFERENCE_GRID) as usize;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"LRFR-EMB\"")]
    BadMagic([u8; 8]),
    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),
    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("embedding {0} contains NaN or infinite components")]
    NonFinite(String),
    #[error("duplicate image id {0}")]
    DuplicateImageId(String),
    #[error("identifier longer than 65535 bytes: {0}")]
    IdTooLong(String),
    #[error("invalid utf-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("unknown embedding backend {0:?}")]
    UnknownBackend(String),
    #[error("no embedding for image {0}")]
    MissingEmbedding(String),
    #[error("backend {0} needs pixel data but none was supplied")]
    MissingImage(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T: Scalar = f32> {
    pub image_id: String,
    pub subject_id: String,
    pub vector: Vec<T>,
}

/// Provenance of a set of embeddings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendDescriptor {
    pub name: String,
    /// Model input side length, when the backend has a fixed one.
    pub input_size: Option<u32>,
    pub dim: usize,
    pub training_data: String,
}

impl BackendDescriptor {
    pub fn reference() -> Self {
        Self {
            name: "reference".into(),
            input_size: None,
            dim: REFERENCE_DIM,
            training_data: "none (deterministic pixel embedder)".into(),
        }
    }

    fn from_file(path: &Path, dim: usize) -> Self {
        Self { name: format!("file:{}", path.display()), input_size: None, dim, training_data: "precomputed".into() }
    }
}

/// Metadata of the pretrained networks whose embeddings the toolkit is
/// designed to consume through the file backend.
pub fn pretrained_models() -> Vec<BackendDescriptor> {
    [
        ("model-a", "ResNet-50", "VGGFace2", 224, 2048),
        ("model-b", "ResNet-50", "MS-Celeb-1M, fine-tuned on VGGFace2", 224, 2048),
        ("model-c", "SENet-50", "VGGFace2", 224, 2048),
        ("model-d", "SENet-50", "MS-Celeb-1M, fine-tuned on VGGFace2", 224, 2048),
        ("model-e", "LResNet50E-IR", "MS-Celeb-1M", 112, 512),
        ("model-f", "LResNet50E-IR", "MS-Celeb-1M, fine-tuned on VGGFace2", 112, 512),
        ("model-g", "LResNet100E-IR", "MS-Celeb-1M", 112, 512),
        ("model-h", "LResNet100E-IR", "MS-Celeb-1M, fine-tuned on VGGFace2", 112, 512),
    ]
    .into_iter()
    .map(|(name, arch, data, input, dim)| BackendDescriptor {
        name: name.into(),
        input_size: Some(input),
        dim,
        training_data: format!("{arch} trained on {data}"),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T: Scalar = f32> {
    pub dim: usize,
    pub backend: BackendDescriptor,
    pub entries: Vec<Embedding<T>>,
}

impl<T: Scalar> EmbeddingSet<T> {
    pub fn new(dim: usize, backend: BackendDescriptor, entries: Vec<Embedding<T>>) -> Result<Self, EmbeddingError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.vector.len() != dim {
                return Err(EmbeddingError::DimMismatch { expected: dim, found: e.vector.len() });
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite(e.image_id.clone()));
            }
            if !seen.insert(e.image_id.as_str()) {
                return Err(EmbeddingError::DuplicateImageId(e.image_id.clone()));
            }
        }
        Ok(Self { dim, backend, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Size in bytes of the encoded file for `set`.
pub fn encoded_len(set: &EmbeddingSet) -> usize {
    HEADER_LEN + set.entries.iter().map(|e| 2 + e.image_id.len() + 2 + e.subject_id.len() + 4 * set.dim).sum::<usize>()
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u16).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub fn encode_embeddings(set: &EmbeddingSet, mut w: impl Write) -> Result<(), EmbeddingError> {
    let io = |source| EmbeddingError::Io { path: "<writer>".into(), source };
    for e in &set.entries {
        if e.vector.len() != set.dim {
            return Err(EmbeddingError::DimMismatch { expected: set.dim, found: e.vector.len() });
        }
        for s in [&e.image_id, &e.subject_id] {
            if s.len() > u16::MAX as usize {
                return Err(EmbeddingError::IdTooLong(s.clone()));
            }
        }
    }
    let dim = u32::try_from(set.dim)
        .map_err(|_| EmbeddingError::DimMismatch { expected: u32::MAX as usize, found: set.dim })?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&dim.to_le_bytes()).map_err(io)?;
    w.write_all(&(set.entries.len() as u64).to_le_bytes()).map_err(io)?;
    let mut buf = Vec::with_capacity(4 * set.dim);
    for e in &set.entries {
        write_str(&mut w, &e.image_id).map_err(io)?;
        write_str(&mut w, &e.subject_id).map_err(io)?;
        buf.clear();
        for v in &e.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct Cursor<'a> {
    data: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], EmbeddingError> {
        if self.data.len() < n {
            return Err(EmbeddingError::TruncatedFile(what));
        }
        let (head, tail) = self.data.split_at(n);
        self.data = tail;
        Ok(head)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, EmbeddingError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String, EmbeddingError> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| EmbeddingError::InvalidUtf8(what))
    }
}

/// Decode an embedding file image. Bytes left over after `count` records
/// mean the records do not have the header's dimension.
pub fn decode_embeddings(data: &[u8], backend_name: &Path) -> Result<EmbeddingSet, EmbeddingError> {
    let mut cur = Cursor { data };
    let magic: [u8; 8] = cur.take(8, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(EmbeddingError::BadMagic(magic));
    }
    let version = cur.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(EmbeddingError::VersionUnsupported(version));
    }
    let dim = u32::from_le_bytes(cur.take(4, "dim")?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(cur.take(8, "count")?.try_into().unwrap());
    // each record needs at least 4 + 4*dim bytes; guards the allocation
    let min_record = 4 + 4 * dim as u64;
    if count.saturating_mul(min_record) > cur.data.len() as u64 {
        return Err(EmbeddingError::TruncatedFile("records"));
    }
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let image_id = cur.string("image id")?;
        let subject_id = cur.string("subject id")?;
        let raw = cur.take(4 * dim, "vector")?;
        let vector = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push(Embedding { image_id, subject_id, vector });
    }
    if !cur.data.is_empty() {
        return Err(EmbeddingError::DimMismatch { expected: dim, found: dim + cur.data.len() / 4 });
    }
    EmbeddingSet::new(dim, BackendDescriptor::from_file(backend_name, dim), entries)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<(), EmbeddingError> {
    let mut buf = Vec::with_capacity(encoded_len(set));
    encode_embeddings(set, &mut buf)?;
    std::fs::write(path, buf).map_err(|source| EmbeddingError::Io { path: path.display().to_string(), source })
}

/// Read an embedding file. The returned set's backend descriptor records
/// the file it came from; the format itself carries no provenance.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet, EmbeddingError> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|source| EmbeddingError::Io { path: path.display().to_string(), source })?;
    decode_embeddings(&data, path)
}

/// Grayscale, area-resample to a 16x16 grid, flatten row-major and remove
/// the vector's own mean.
///
/// The grid samples are integers and their mean is a multiple of 1/256, so
/// the centered components are exact in `f32` and the output mean is
/// exactly zero.
pub fn reference_embed(img: &ImageBuffer) -> Vec<f32> {
    let gray = to_grayscale(img);
    let grid = resize(&gray, REFERENCE_GRID, REFERENCE_GRID, ResizeKernel::Area).expect("grid size is positive");
    let sum: u32 = grid.pixels().iter().map(|&p| p as u32).sum();
    let mean = sum as f64 / REFERENCE_DIM as f64;
    grid.pixels().iter().map(|&p| (p as f64 - mean) as f32).collect()
}

/// A function from a face image (or its id, for precomputed backends) to a
/// fixed-dimension feature vector. Implementations must be callable from
/// many threads at once.
pub trait Embedder: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Whether [`Embedder::embed`] reads pixels. Precomputed backends only
    /// look at the image id.
    fn needs_image(&self) -> bool;

    fn embed(&self, image_id: &str, image: Option<&ImageBuffer>) -> Result<Vec<f32>, EmbeddingError>;
}

/// Call `backend` and enforce its declared dimension and finiteness.
pub fn embed_checked(
    backend: &dyn Embedder,
    image_id: &str,
    image: Option<&ImageBuffer>,
) -> Result<Vec<f32>, EmbeddingError> {
    let v = backend.embed(image_id, image)?;
    let expected = backend.descriptor().dim;
    if v.len() != expected {
        return Err(EmbeddingError::DimMismatch { expected, found: v.len() });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite(image_id.to_string()));
    }
    Ok(v)
}

#[derive(Debug)]
pub struct ReferenceEmbedder {
    descriptor: BackendDescriptor,
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        Self { descriptor: BackendDescriptor::reference() }
    }
}

impl Embedder for ReferenceEmbedder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn needs_image(&self) -> bool {
        true
    }

    fn embed(&self, _image_id: &str, image: Option<&ImageBuffer>) -> Result<Vec<f32>, EmbeddingError> {
        let image = image.ok_or_else(|| EmbeddingError::MissingImage(self.descriptor.name.clone()))?;
        Ok(reference_embed(image))
    }
}

/// Serves precomputed embeddings by image id.
#[derive(Debug)]
pub struct FileEmbedder {
    descriptor: BackendDescriptor,
    by_id: HashMap<String, Vec<f32>>,
}

impl FileEmbedder {
    pub fn open(path: &Path) -> Result<Self, EmbeddingError> {
        Ok(Self::from_set(read_embeddings(path)?))
    }

    pub fn from_set(set: EmbeddingSet) -> Self {
        let by_id = set.entries.into_iter().map(|e| (e.image_id, e.vector)).collect();
        Self { descriptor: set.backend, by_id }
    }
}

impl Embedder for FileEmbedder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn needs_image(&self) -> bool {
        false
    }

    fn embed(&self, image_id: &str, _image: Option<&ImageBuffer>) -> Result<Vec<f32>, EmbeddingError> {
        self.by_id.get(image_id).cloned().ok_or_else(|| EmbeddingError::MissingEmbedding(image_id.to_string()))
    }
}

pub type BackendFactory = Box<dyn Fn(&str) -> Result<Arc<dyn Embedder>, EmbeddingError> + Send + Sync>;

/// Name-to-backend lookup. Plain names match exactly; `scheme:argument`
/// names dispatch to a scheme factory with the argument.
pub struct BackendRegistry {
    named: BTreeMap<String, BackendFactory>,
    schemes: BTreeMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register("reference", Box::new(|_| Ok(Arc::new(ReferenceEmbedder::default()) as Arc<dyn Embedder>)));
        reg.register_scheme(
            "file",
            Box::new(|arg| Ok(Arc::new(FileEmbedder::open(&PathBuf::from(arg))?) as Arc<dyn Embedder>)),
        );
        reg
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self { named: BTreeMap::new(), schemes: BTreeMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, factory: BackendFactory) {
        self.named.insert(name.into(), factory);
    }

    pub fn register_scheme(&mut self, scheme: impl Into<String>, factory: BackendFactory) {
        self.schemes.insert(scheme.into(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }
}

pub fn resolve_backend(name: &str, registry: &BackendRegistry) -> Result<Arc<dyn Embedder>, EmbeddingError> {
    if let Some(factory) = registry.named.get(name) {
        return factory(name);
    }
    if let Some((scheme, arg)) = name.split_once(':') {
        if let Some(factory) = registry.schemes.get(scheme) {
            return factory(arg);
        }
    }
    Err(EmbeddingError::UnknownBackend(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set_of(dim: usize, n: usize) -> EmbeddingSet {
        let entries = (0..n)
            .map(|i| Embedding {
                image_id: format!("img-{i}"),
                subject_id: format!("{:03}", i % 7),
                vector: (0..dim).map(|k| ((i * 31 + k * 17) % 101) as f32 * 0.25 - 12.0).collect(),
            })
            .collect();
        EmbeddingSet::new(dim, BackendDescriptor::reference(), entries).unwrap()
    }

    fn encode(set: &EmbeddingSet) -> Vec<u8> {
        let mut buf = Vec::new();
        encode_embeddings(set, &mut buf).unwrap();
        buf
    }

    #[test]
    fn file_size_arithmetic() {
        let set = set_of(512, 130);
        let bytes = encode(&set);
        let expected: usize =
            22 + set.entries.iter().map(|e| 2 + e.image_id.len() + 2 + e.subject_id.len() + 512 * 4).sum::<usize>();
        assert_eq!(bytes.len(), expected);
        assert_eq!(encoded_len(&set), expected);
        assert_eq!(&bytes[..8], b"LRFR-EMB");
        assert_eq!(&bytes[8..10], &[1, 0]);
        assert_eq!(&bytes[10..14], &512u32.to_le_bytes());
        assert_eq!(&bytes[14..22], &130u64.to_le_bytes());
    }

    #[test]
    fn empty_set_round_trip() {
        let set = EmbeddingSet::new(2048, BackendDescriptor::reference(), vec![]).unwrap();
        let bytes = encode(&set);
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = decode_embeddings(&bytes, Path::new("x.emb")).unwrap();
        assert_eq!(back.dim, 2048);
        assert!(back.is_empty());
    }

    #[test]
    fn decode_errors() {
        let good = encode(&set_of(4, 3));
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_embeddings(&bad, Path::new("x")), Err(EmbeddingError::BadMagic(_))));

        let mut v2 = good.clone();
        v2[8] = 2;
        assert!(matches!(decode_embeddings(&v2, Path::new("x")), Err(EmbeddingError::VersionUnsupported(2))));

        for cut in [3, 12, 20, good.len() - 1] {
            assert!(
                matches!(decode_embeddings(&good[..cut], Path::new("x")), Err(EmbeddingError::TruncatedFile(_))),
                "cut at {cut}"
            );
        }

        let mut long = good.clone();
        long.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_embeddings(&long, Path::new("x")), Err(EmbeddingError::DimMismatch { .. })));

        // header claims dim 5 while records carry 4 floats
        let mut wrong_dim = good.clone();
        wrong_dim[10..14].copy_from_slice(&5u32.to_le_bytes());
        assert!(decode_embeddings(&wrong_dim, Path::new("x")).is_err());
    }

    #[test]
    fn set_validation() {
        let e = |id: &str, v: Vec<f32>| Embedding { image_id: id.into(), subject_id: "s".into(), vector: v };
        let d = BackendDescriptor::reference;
        assert!(matches!(
            EmbeddingSet::new(2, d(), vec![e("a", vec![1.0])]),
            Err(EmbeddingError::DimMismatch { expected: 2, found: 1 })
        ));
        assert!(matches!(EmbeddingSet::new(1, d(), vec![e("a", vec![f32::NAN])]), Err(EmbeddingError::NonFinite(_))));
        assert!(matches!(
            EmbeddingSet::new(1, d(), vec![e("a", vec![1.0]), e("a", vec![2.0])]),
            Err(EmbeddingError::DuplicateImageId(_))
        ));
    }

    #[test]
    fn reference_embedding_properties() {
        let gray = ImageBuffer::filled(50, 70, &[120, 120, 120]).unwrap();
        assert!(reference_embed(&gray).iter().all(|&v| v == 0.0));

        let img = ImageBuffer::from_fn(64, 48, 3, |x, y, c| ((x * x + 3 * y + c as u32 * 40) % 256) as u8).unwrap();
        let a = reference_embed(&img);
        assert_eq!(a.len(), REFERENCE_DIM);
        assert_eq!(a, reference_embed(&img));
        let mean: f64 = a.iter().map(|&v| v as f64).sum::<f64>() / a.len() as f64;
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn registry_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe_d1.emb");
        write_embeddings(&set_of(8, 3), &path).unwrap();
        let reg = BackendRegistry::default();

        let reference = resolve_backend("reference", &reg).unwrap();
        assert_eq!(reference.descriptor().dim, 256);
        assert!(reference.needs_image());

        let file = resolve_backend(&format!("file:{}", path.display()), &reg).unwrap();
        assert_eq!(file.descriptor().dim, 8);
        assert_eq!(embed_checked(file.as_ref(), "img-1", None).unwrap().len(), 8);
        assert!(matches!(file.embed("absent", None), Err(EmbeddingError::MissingEmbedding(id)) if id == "absent"));

        assert!(matches!(resolve_backend("model-z", &reg), Err(EmbeddingError::UnknownBackend(_))));
        assert!(matches!(resolve_backend("nope:thing", &reg), Err(EmbeddingError::UnknownBackend(_))));
    }

    struct Liar(BackendDescriptor);

    impl Embedder for Liar {
        fn descriptor(&self) -> &BackendDescriptor {
            &self.0
        }
        fn needs_image(&self) -> bool {
            false
        }
        fn embed(&self, _: &str, _: Option<&ImageBuffer>) -> Result<Vec<f32>, EmbeddingError> {
            Ok(vec![1.0; 3])
        }
    }

    #[test]
    fn dim_contract_is_enforced() {
        let liar =
            Liar(BackendDescriptor { name: "liar".into(), input_size: None, dim: 4, training_data: String::new() });
        assert!(matches!(embed_checked(&liar, "x", None), Err(EmbeddingError::DimMismatch { expected: 4, found: 3 })));
        let mut reg = BackendRegistry::empty();
        reg.register(
            "liar",
            Box::new(|_| {
                Ok(Arc::new(Liar(BackendDescriptor {
                    name: "liar".into(),
                    input_size: None,
                    dim: 3,
                    training_data: String::new(),
                })) as Arc<dyn Embedder>)
            }),
        );
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["liar"]);
        assert!(resolve_backend("reference", &reg).is_err());
        assert!(resolve_backend("liar", &reg).is_ok());
    }

    #[test]
    fn table_models_metadata() {
        let models = pretrained_models();
        assert_eq!(models.len(), 8);
        assert!(models[..4].iter().all(|m| m.input_size == Some(224) && m.dim == 2048));
        assert!(models[4..].iter().all(|m| m.input_size == Some(112) && m.dim == 512));
    }

    proptest! {
        #[test]
        fn round_trip_preserves_bits(
            dim in 1usize..40,
            raw in prop::collection::vec((any::<u32>(), "[a-zA-Z0-9_é]{0,12}"), 0..20),
        ) {
            let entries: Vec<Embedding> = raw.iter().enumerate().map(|(i, (bits, subj))| Embedding {
                image_id: format!("id{i}"),
                subject_id: subj.clone(),
                vector: (0..dim).map(|k| {
                    let v = f32::from_bits(bits.wrapping_mul(k as u32 + 1));
                    if v.is_finite() { v } else { k as f32 }
                }).collect(),
            }).collect();
            let set = EmbeddingSet::new(dim, BackendDescriptor::reference(), entries).unwrap();
            let back = decode_embeddings(&encode(&set), Path::new("p")).unwrap();
            prop_assert_eq!(back.dim, set.dim);
            prop_assert_eq!(back.entries.len(), set.entries.len());
            for (a, b) in back.entries.iter().zip(&set.entries) {
                prop_assert_eq!(&a.image_id, &b.image_id);
                prop_assert_eq!(&a.subject_id, &b.subject_id);
                let ab: Vec<u32> = a.vector.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.vector.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
