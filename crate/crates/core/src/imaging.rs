//! 8-bit raster images, deterministic resampling and the gallery
//! resolution-matching transform.
//!
//! All resampling is separable (horizontal pass, then vertical pass) with
//! 32-bit float accumulation and a single half-up rounding to 8 bits at the
//! end. Kernel weights are a pure function of the source and destination
//! sizes, so results are bit-identical across runs and thread counts.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(u8),
    #[error("pixel buffer holds {actual} samples, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("decode error for {path}: {message}")]
    Decode { path: String, message: String },
    #[error("encode error for {path}: {message}")]
    Encode { path: String, message: String },
}

/// Row-major, channel-interleaved 8-bit image with 1 (gray) or 3 (RGB)
/// channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidDims(format!("{width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImagingError::UnsupportedChannels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(ImagingError::BufferSize { expected, actual: pixels.len() });
        }
        Ok(Self { width, height, channels, pixels })
    }

    /// Image with every pixel set to `value` (one sample per channel).
    pub fn filled(width: u32, height: u32, value: &[u8]) -> Result<Self, ImagingError> {
        let channels = value.len() as u8;
        let n = width as usize * height as usize;
        let pixels = value.iter().copied().cycle().take(n * value.len()).collect();
        Self::new(width, height, channels, pixels)
    }

    /// Build an image by evaluating `f(x, y, channel)` for every sample.
    pub fn from_fn(
        width: u32,
        height: u32,
        channels: u8,
        f: impl Fn(u32, u32, u8) -> u8,
    ) -> Result<Self, ImagingError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * channels as usize);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    /// Samples of the pixel at `(x, y)`.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.pixels[i..i + c]
    }

    /// Decode a PNG or JPEG file. Gray inputs stay single-channel; anything
    /// with color is converted to RGB (alpha dropped).
    pub fn open(path: &Path) -> Result<Self, ImagingError> {
        let decode_err =
            |e: image::ImageError| ImagingError::Decode { path: path.display().to_string(), message: e.to_string() };
        let img = image::ImageReader::open(path)
            .map_err(|e| ImagingError::Decode { path: path.display().to_string(), message: e.to_string() })?
            .with_guessed_format()
            .map_err(|e| ImagingError::Decode { path: path.display().to_string(), message: e.to_string() })?
            .decode()
            .map_err(decode_err)?;
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            Self::new(rgb.width(), rgb.height(), 3, rgb.into_raw())
        } else {
            let gray = img.to_luma8();
            Self::new(gray.width(), gray.height(), 1, gray.into_raw())
        }
    }

    /// Write the image as PNG. Intermediate artifacts are always lossless.
    pub fn save_png(&self, path: &Path) -> Result<(), ImagingError> {
        let color = if self.channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
        image::save_buffer_with_format(path, &self.pixels, self.width, self.height, color, image::ImageFormat::Png)
            .map_err(|e| ImagingError::Encode { path: path.display().to_string(), message: e.to_string() })
    }
}

/// Interpolation kernel for [`resize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResizeKernel {
    /// Box filter weighted by exact pixel-area overlap.
    Area,
    /// Linear interpolation between the two nearest samples, half-pixel centers.
    Bilinear,
    /// Catmull-Rom cubic (a = -0.5), half-pixel centers.
    Bicubic,
}

const CUBIC_A: f64 = -0.5;

/// Source taps contributing to one output coordinate along an axis.
#[derive(Debug, Clone)]
struct Taps {
    indices: Vec<usize>,
    weights: Vec<f32>,
}

fn cubic_weight(d: f64) -> f64 {
    let d = d.abs();
    if d <= 1.0 {
        (CUBIC_A + 2.0) * d * d * d - (CUBIC_A + 3.0) * d * d + 1.0
    } else if d < 2.0 {
        CUBIC_A * d * d * d - 5.0 * CUBIC_A * d * d + 8.0 * CUBIC_A * d - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

fn clamp_index(i: i64, len: usize) -> usize {
    i.clamp(0, len as i64 - 1) as usize
}

fn axis_taps(src: usize, dst: usize, kernel: ResizeKernel) -> Vec<Taps> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let mut indices = Vec::new();
            let mut raw = Vec::new();
            match kernel {
                ResizeKernel::Area => {
                    let lo = i as f64 * scale;
                    let hi = (i + 1) as f64 * scale;
                    let first = lo.floor() as usize;
                    let last = (hi.ceil() as usize).min(src);
                    for j in first..last {
                        let overlap = hi.min((j + 1) as f64) - lo.max(j as f64);
                        if overlap > 0.0 {
                            indices.push(j);
                            raw.push(overlap);
                        }
                    }
                }
                ResizeKernel::Bilinear => {
                    let center = (i as f64 + 0.5) * scale - 0.5;
                    let base = center.floor();
                    let t = center - base;
                    let base = base as i64;
                    indices.push(clamp_index(base, src));
                    raw.push(1.0 - t);
                    indices.push(clamp_index(base + 1, src));
                    raw.push(t);
                }
                ResizeKernel::Bicubic => {
                    let center = (i as f64 + 0.5) * scale - 0.5;
                    let base = center.floor();
                    let t = center - base;
                    let base = base as i64;
                    for k in -1..=2i64 {
                        indices.push(clamp_index(base + k, src));
                        raw.push(cubic_weight(k as f64 - t));
                    }
                }
            }
            let total: f64 = raw.iter().sum();
            let weights = raw.iter().map(|w| (w / total) as f32).collect();
            Taps { indices, weights }
        })
        .collect()
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Resample `img` to exactly `out_w` x `out_h`.
///
/// With `Area` or `Bilinear` and unchanged dimensions the output is
/// byte-identical to the input.
pub fn resize(img: &ImageBuffer, out_w: u32, out_h: u32, kernel: ResizeKernel) -> Result<ImageBuffer, ImagingError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::InvalidDims(format!("resize target {out_w}x{out_h}")));
    }
    let (sw, sh) = (img.width as usize, img.height as usize);
    let (dw, dh) = (out_w as usize, out_h as usize);
    let ch = img.channels as usize;

    let x_taps = axis_taps(sw, dw, kernel);
    let y_taps = axis_taps(sh, dh, kernel);

    // horizontal: sh rows of dw pixels, unrounded
    let mut horizontal = vec![0f32; sh * dw * ch];
    horizontal.par_chunks_mut(dw * ch).enumerate().for_each(|(y, row)| {
        let src_row = &img.pixels[y * sw * ch..(y + 1) * sw * ch];
        for (x, taps) in x_taps.iter().enumerate() {
            for c in 0..ch {
                let mut acc = 0f32;
                for (&j, &w) in taps.indices.iter().zip(&taps.weights) {
                    acc += w * src_row[j * ch + c] as f32;
                }
                row[x * ch + c] = acc;
            }
        }
    });

    let mut out = vec![0u8; dh * dw * ch];
    out.par_chunks_mut(dw * ch).enumerate().for_each(|(y, row)| {
        let taps = &y_taps[y];
        for (i, sample) in row.iter_mut().enumerate() {
            let mut acc = 0f32;
            for (&j, &w) in taps.indices.iter().zip(&taps.weights) {
                acc += w * horizontal[j * dw * ch + i];
            }
            *sample = quantize(acc);
        }
    });

    ImageBuffer::new(out_w, out_h, img.channels, out)
}

/// Non-fatal conditions raised by [`match_resolution`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchWarning {
    /// The requested bottleneck is larger than the source, so the
    /// "downsampling" step actually upscales.
    UpscaleAsMatch { target: u32, source_width: u32, source_height: u32 },
}

impl std::fmt::Display for MatchWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MatchWarning::UpscaleAsMatch { target, source_width, source_height } => {
                write!(f, "UpscaleAsMatch: target {target} exceeds source {source_width}x{source_height}")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Matched {
    pub image: ImageBuffer,
    pub warning: Option<MatchWarning>,
}

/// Degrade a gallery image to a `target` x `target` bottleneck (area
/// kernel), then bring it back to the model input size with bicubic
/// interpolation.
pub fn match_resolution(img: &ImageBuffer, target: u32, input_size: u32) -> Result<Matched, ImagingError> {
    if target == 0 {
        return Err(ImagingError::InvalidDims("resolution target must be >= 1".into()));
    }
    if input_size < target {
        return Err(ImagingError::InvalidDims(format!(
            "input size {input_size} smaller than resolution target {target}"
        )));
    }
    let warning = (target > img.width.min(img.height)).then_some(MatchWarning::UpscaleAsMatch {
        target,
        source_width: img.width,
        source_height: img.height,
    });
    let low = resize(img, target, target, ResizeKernel::Area)?;
    let image = resize(&low, input_size, input_size, ResizeKernel::Bicubic)?;
    Ok(Matched { image, warning })
}

/// Kernel used when bringing a crop to the model input size: area when
/// shrinking along both axes, bicubic otherwise.
pub fn input_kernel(src_w: u32, src_h: u32, out_w: u32, out_h: u32) -> ResizeKernel {
    if out_w <= src_w && out_h <= src_h {
        ResizeKernel::Area
    } else {
        ResizeKernel::Bicubic
    }
}

/// ITU-R BT.601 luma, rounded half-up. Single-channel input is returned
/// unchanged.
pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        return img.clone();
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| quantize(0.299f32 * p[0] as f32 + 0.587f32 * p[1] as f32 + 0.114f32 * p[2] as f32))
        .collect();
    ImageBuffer { width: img.width, height: img.height, channels: 1, pixels }
}
