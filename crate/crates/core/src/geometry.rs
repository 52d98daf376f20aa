//! Face box extension and padded cropping.

use thiserror::Error;

use crate::imaging::ImageBuffer;
use crate::scalar::Scalar;

/// Crop ratios swept in the crop-ratio experiments.
pub const CROP_RATIOS: [f64; 6] = [1.0, 1.1, 1.2, 1.3, 1.35, 1.40];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("crop ratio must be positive and finite, got {0}")]
    InvalidRatio(f64),
    #[error("box width and height must be positive, got {w}x{h}")]
    InvalidBox { w: f64, h: f64 },
    #[error("crop rounds to an empty region ({w}x{h})")]
    EmptyCrop { w: i64, h: i64 },
}

/// Axis-aligned box in pixel coordinates: `(x, y)` is the top-left corner.
///
/// After extension the box may reach outside the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceBox<T: Scalar> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> FaceBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Result<Self, GeometryError> {
        if !(w > T::zero() && h > T::zero()) || !x.is_finite() || !y.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(GeometryError::InvalidBox { w: w.widen(), h: h.widen() });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> (T, T) {
        let two = T::one() + T::one();
        (self.x + self.w / two, self.y + self.h / two)
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }
}

/// Scale a box about its center by `ratio` in both dimensions.
pub fn extend_box<T: Scalar>(b: &FaceBox<T>, ratio: T) -> Result<FaceBox<T>, GeometryError> {
    if ratio <= T::zero() || !ratio.is_finite() {
        return Err(GeometryError::InvalidRatio(ratio.widen()));
    }
    if ratio == T::one() {
        return Ok(*b);
    }
    let (cx, cy) = b.center();
    let two = T::one() + T::one();
    let w = b.w * ratio;
    let h = b.h * ratio;
    Ok(FaceBox { x: cx - w / two, y: cy - h / two, w, h })
}

/// Integer crop window derived from a float box: origin `floor(x), floor(y)`,
/// size `round(w), round(h)` (half away from zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x: i64,
    pub y: i64,
    pub w: u32,
    pub h: u32,
}

impl CropWindow {
    pub fn from_box<T: Scalar>(b: &FaceBox<T>) -> Result<Self, GeometryError> {
        let w = b.w.widen().round() as i64;
        let h = b.h.widen().round() as i64;
        if w < 1 || h < 1 {
            return Err(GeometryError::EmptyCrop { w, h });
        }
        Ok(Self { x: b.x.widen().floor() as i64, y: b.y.widen().floor() as i64, w: w as u32, h: h as u32 })
    }
}

/// Crop `b` out of `img`. Pixels outside the source replicate the nearest
/// edge pixel, so the crop keeps the box's aspect ratio.
pub fn crop_padded<T: Scalar>(img: &ImageBuffer, b: &FaceBox<T>) -> Result<ImageBuffer, GeometryError> {
    let win = CropWindow::from_box(b)?;
    Ok(crop_window(img, &win))
}

pub fn crop_window(img: &ImageBuffer, win: &CropWindow) -> ImageBuffer {
    let ch = img.channels() as usize;
    let max_x = img.width() as i64 - 1;
    let max_y = img.height() as i64 - 1;
    let src = img.pixels();
    let src_stride = img.width() as usize * ch;
    let mut out = Vec::with_capacity(win.w as usize * win.h as usize * ch);
    for row in 0..win.h as i64 {
        let sy = (win.y + row).clamp(0, max_y) as usize;
        let line = &src[sy * src_stride..(sy + 1) * src_stride];
        for col in 0..win.w as i64 {
            let sx = (win.x + col).clamp(0, max_x) as usize;
            out.extend_from_slice(&line[sx * ch..(sx + 1) * ch]);
        }
    }
    ImageBuffer::new(win.w, win.h, img.channels(), out).expect("crop window dims are positive")
}
