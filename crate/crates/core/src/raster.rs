//! 8-bit RGB raster buffers and PNG/JPEG file IO.
//!
//! Everything downstream (compositing, annotation rendering, backend image
//! payloads) works on [`ImageBuffer`]: a row-major RGB byte buffer with no
//! alpha channel. Files are decoded through the `image` crate and converted
//! on load — grayscale channels are replicated, input alpha is dropped — so
//! the rest of the pipeline only ever sees plain RGB.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage};
use thiserror::Error;

/// Errors from buffer construction or image file IO.
#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image dimensions must be positive (got {width}x{height})")]
    ZeroDimension { width: u32, height: u32 },
    #[error("pixel buffer length {len} does not match {width}x{height} RGB")]
    BufferSize { width: u32, height: u32, len: usize },
    #[error("failed to read image {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to encode image: {0}")]
    Encode(#[source] image::ImageError),
}

/// Decoded raster image: 8-bit RGB triples, row-major, top-left origin.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish()
    }
}

impl ImageBuffer {
    /// Solid-color image of the given size.
    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::ZeroDimension { width, height });
        }
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..(width as usize * height as usize) {
            data.extend_from_slice(&color);
        }
        Ok(Self { width, height, data })
    }

    /// Wraps an existing row-major RGB byte buffer.
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::ZeroDimension { width, height });
        }
        if data.len() != width as usize * height as usize * 3 {
            return Err(RasterError::BufferSize {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Raw RGB bytes, row-major.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y as usize * self.width as usize + x as usize) * 3
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, color: [u8; 3]) {
        let i = self.offset(x, y);
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Decodes a PNG or JPEG file, converting to RGB.
    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let decode_err = |source| RasterError::Decode {
            path: path.display().to_string(),
            source,
        };
        let dynamic = image::ImageReader::open(path)
            .map_err(|e| decode_err(image::ImageError::IoError(e)))?
            .decode()
            .map_err(decode_err)?;
        Ok(Self::from_dynamic(dynamic))
    }

    fn from_dynamic(dynamic: DynamicImage) -> Self {
        let rgb = dynamic.to_rgb8();
        let (width, height) = rgb.dimensions();
        Self {
            width,
            height,
            data: rgb.into_raw(),
        }
    }

    fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length invariant")
    }

    /// Writes the buffer as PNG. PNG is lossless, so a save/load round trip
    /// preserves every byte — required for bit-exact compositing checks.
    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        self.to_rgb_image()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|source| RasterError::Write {
                path: path.display().to_string(),
                source,
            })
    }

    /// Encodes the buffer as in-memory PNG bytes (backend payloads).
    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut bytes = Vec::new();
        self.to_rgb_image()
            .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
            .map_err(RasterError::Encode)?;
        Ok(bytes)
    }
}
