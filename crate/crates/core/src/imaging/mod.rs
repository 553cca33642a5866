//! Images and augmentation kernels.
//!
//! Pixels are stored row-major, interleaved RGB, with intensities in `[0, 1]`.
//! Interpolating kernels treat pixel centers as integer coordinates.

mod color;
mod geometry;
mod policy;
mod ppm;

pub use color::{color_jitter, hsv_to_rgb, rgb_to_hsv, HsvImage};
pub use geometry::{crop_with_offsets, flip_horizontal, resize_bilinear, rotate, CropOffsets};
pub use policy::{
    apply_augmentation, sample_augmentation, AugmentationParams, AugmentationPolicy, PolicyPreset,
};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("image dimensions must be positive, got {height}x{width}")]
    EmptyImage { height: usize, width: usize },
    #[error("expected {expected} intensities for the image shape, got {actual}")]
    PixelCount { expected: usize, actual: usize },
    #[error("intensity {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("crop offsets {offsets:?} leave a {height}x{width} region")]
    DegenerateCrop { offsets: CropOffsets, height: i64, width: i64 },
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ImagingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Black image.
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImagingError::EmptyImage { height, width });
        }
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::from_pixels(height, width, pixels)
    }

    /// Wraps interleaved RGB intensities, validating shape and range.
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImagingError::EmptyImage { height, width });
        }
        let expected = height * width * 3;
        if pixels.len() != expected {
            return Err(ImagingError::PixelCount { expected, actual: pixels.len() });
        }
        if let Some((index, &value)) =
            pixels.iter().enumerate().find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(ImagingError::OutOfRange { index, value });
        }
        Ok(Image { height, width, pixels })
    }

    // Kernels in this module only ever produce in-range values.
    pub(crate) fn from_raw(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), height * width * 3);
        Image { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Sets one pixel, clamping each channel into `[0, 1]`.
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.pixels[i + c] = clamp_unit(rgb[c]);
        }
    }

    pub fn channel_sums(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as f64;
            }
        }
        sums
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f32) -> f32 {
    // NaN maps to 0 so the range invariant survives pathological inputs.
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}
