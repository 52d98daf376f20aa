//! Seeded synthetic watchlist corpora for hermetic end-to-end runs.
//!
//! Each subject is a smooth random "scene" (a coarse random grid upsampled
//! bicubically). The gallery image is the scene at full size; probes are
//! the same scene area-downsampled to a condition-specific size plus a
//! little uniform noise. Face boxes cover the same relative region in
//! every image, so crop ratios select the same content at every
//! resolution.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::corpus::{write_manifest, CorpusError, ImageRecord, Manifest, Role};
use crate::geometry::FaceBox;
use crate::imaging::{resize, ImageBuffer, ImagingError, ResizeKernel};
use crate::pipeline::MemoryImageSource;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub subjects: usize,
    /// (condition tag, probe scene side) pairs.
    pub conditions: Vec<(String, u32)>,
    pub probes_per_condition: usize,
    /// Gallery scene side; the face box is the central half.
    pub gallery_size: u32,
    /// Coarse grid side controlling scene detail.
    pub grid: u32,
    /// Probe noise amplitude in gray levels (uniform in `-noise..=noise`).
    pub noise: u8,
    pub channels: u8,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            subjects: 10,
            conditions: vec![("d1".into(), 24), ("d2".into(), 32), ("d3".into(), 48)],
            probes_per_condition: 2,
            gallery_size: 96,
            grid: 6,
            noise: 2,
            channels: 3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub manifest: Manifest,
    pub images: Vec<(String, ImageBuffer)>,
}

impl SyntheticCorpus {
    pub fn source(&self) -> MemoryImageSource {
        let mut src = MemoryImageSource::new();
        for (id, img) in &self.images {
            src.insert(id.clone(), img.clone());
        }
        src
    }

    /// Write `images/<id>.png` and `manifest.csv` under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SyntheticError> {
        std::fs::create_dir_all(dir.join("images")).map_err(|e| SyntheticError::Io(e.to_string()))?;
        for (id, img) in &self.images {
            img.save_png(&dir.join("images").join(format!("{id}.png")))?;
        }
        write_manifest(&self.manifest, &dir.join("manifest.csv"))?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io: {0}")]
    Io(String),
}

fn central_box(side: u32) -> FaceBox<f64> {
    let s = side as f64;
    FaceBox::new(s / 4.0, s / 4.0, s / 2.0, s / 2.0).expect("side >= 1")
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus, SyntheticError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    let mut images = Vec::new();
    for s in 0..spec.subjects {
        let subject = format!("{s:03}");
        let coarse: Vec<u8> =
            (0..spec.grid * spec.grid * spec.channels as u32).map(|_| (rng.next_u32() % 256) as u8).collect();
        let coarse = ImageBuffer::new(spec.grid, spec.grid, spec.channels, coarse)?;
        let scene = resize(&coarse, spec.gallery_size, spec.gallery_size, ResizeKernel::Bicubic)?;

        let gid = format!("g{subject}");
        records.push(ImageRecord {
            image_id: gid.clone(),
            subject_id: subject.clone(),
            role: Role::Gallery,
            condition: "gallery".into(),
            path: format!("images/{gid}.png").into(),
            face_box: Some(central_box(spec.gallery_size)),
            landmarks: None,
        });
        images.push((gid, scene.clone()));

        for (cond, side) in &spec.conditions {
            let small = resize(&scene, *side, *side, ResizeKernel::Area)?;
            for k in 0..spec.probes_per_condition {
                let span = 2 * spec.noise as u32 + 1;
                let pixels = small
                    .pixels()
                    .iter()
                    .map(|&p| (p as i32 + (rng.next_u32() % span) as i32 - spec.noise as i32).clamp(0, 255) as u8)
                    .collect();
                let probe = ImageBuffer::new(*side, *side, spec.channels, pixels)?;
                let pid = format!("p{subject}_{cond}_{k}");
                records.push(ImageRecord {
                    image_id: pid.clone(),
                    subject_id: subject.clone(),
                    role: Role::Probe,
                    condition: cond.clone(),
                    path: format!("images/{pid}.png").into(),
                    face_box: Some(central_box(*side)),
                    landmarks: None,
                });
                images.push((pid, probe));
            }
        }
    }
    Ok(SyntheticCorpus { manifest: Manifest::new("synthetic", records)?, images })
}
