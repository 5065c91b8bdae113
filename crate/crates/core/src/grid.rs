//! Grid line geometry and alpha compositing of grid overlays onto images.
//!
//! An N-cell grid draws N−1 interior lines per axis; image borders are not
//! drawn because they coincide with the image edge and add no reference
//! signal. Covered pixels are blended as
//! `out = round(alpha * grid_color + (1 - alpha) * in)` per channel with
//! round-half-up, directly on stored 8-bit sRGB values. Uncovered pixels are
//! passed through untouched, which keeps the output bit-comparable to the
//! input everywhere off the lines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::ImageBuffer;

pub const BLACK: [u8; 3] = [0, 0, 0];
pub const WHITE: [u8; 3] = [255, 255, 255];

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid needs at least 2 cells per axis (got {0})")]
    TooFewCells(u32),
    #[error("alpha must be a finite value in [0, 1] (got {0})")]
    AlphaOutOfRange(f64),
    #[error("line width must be at least 1 pixel")]
    ZeroLineWidth,
    #[error("extent of {extent}px cannot hold {cells} cells")]
    ExtentTooSmall { extent: u32, cells: u32 },
}

/// One grid overlay configuration: the sweep's unit of variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridConfig", into = "RawGridConfig")]
pub struct GridConfig {
    cells: u32,
    color: [u8; 3],
    alpha: f64,
    line_width: u32,
}

#[derive(Serialize, Deserialize)]
struct RawGridConfig {
    cells: u32,
    color: [u8; 3],
    alpha: f64,
    line_width: u32,
}

impl TryFrom<RawGridConfig> for GridConfig {
    type Error = GridError;
    fn try_from(raw: RawGridConfig) -> Result<Self, GridError> {
        GridConfig::new(raw.cells, raw.color, raw.alpha, raw.line_width)
    }
}

impl From<GridConfig> for RawGridConfig {
    fn from(cfg: GridConfig) -> Self {
        RawGridConfig {
            cells: cfg.cells,
            color: cfg.color,
            alpha: cfg.alpha,
            line_width: cfg.line_width,
        }
    }
}

impl GridConfig {
    pub fn new(cells: u32, color: [u8; 3], alpha: f64, line_width: u32) -> Result<Self, GridError> {
        if cells < 2 {
            return Err(GridError::TooFewCells(cells));
        }
        if !alpha.is_finite() || !(0.0..=1.0).contains(&alpha) {
            return Err(GridError::AlphaOutOfRange(alpha));
        }
        if line_width < 1 {
            return Err(GridError::ZeroLineWidth);
        }
        Ok(Self {
            cells,
            color,
            alpha,
            line_width,
        })
    }

    pub fn cells(&self) -> u32 {
        self.cells
    }

    pub fn color(&self) -> [u8; 3] {
        self.color
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn line_width(&self) -> u32 {
        self.line_width
    }
}

/// 9 cells, black, alpha 0.3, 1px lines.
impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cells: 9,
            color: BLACK,
            alpha: 0.3,
            line_width: 1,
        }
    }
}

/// Interior line start offsets for one axis: `round(k * extent / cells)`
/// (round-half-up) for k = 1..cells−1, strictly increasing.
pub fn line_positions(extent: u32, cells: u32) -> Result<Vec<u32>, GridError> {
    if cells < 2 {
        return Err(GridError::TooFewCells(cells));
    }
    if extent < cells {
        return Err(GridError::ExtentTooSmall { extent, cells });
    }
    // round-half-up in exact integer arithmetic: floor((2*k*extent + cells) / (2*cells))
    let positions = (1..cells)
        .map(|k| {
            let num = 2 * k as u64 * extent as u64 + cells as u64;
            (num / (2 * cells as u64)) as u32
        })
        .collect();
    Ok(positions)
}

/// Boolean support of the grid pattern: true where a line covers the pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMask {
    width: u32,
    height: u32,
    covered: Vec<bool>,
}

impl GridMask {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn covered(&self, x: u32, y: u32) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.covered[y as usize * self.width as usize + x as usize]
    }

    pub fn covered_count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }
}

/// Materializes the line support for the given canvas size: a pixel is
/// covered iff its column lies in `[p, p + line_width)` for some vertical
/// line position p, or its row likewise for a horizontal position. Lines run
/// the full image extent and are clipped at the image edge.
pub fn render_grid_mask(width: u32, height: u32, config: &GridConfig) -> Result<GridMask, GridError> {
    let cols = line_positions(width, config.cells)?;
    let rows = line_positions(height, config.cells)?;

    let mut col_hit = vec![false; width as usize];
    for &p in &cols {
        for x in p..(p + config.line_width).min(width) {
            col_hit[x as usize] = true;
        }
    }
    let mut row_hit = vec![false; height as usize];
    for &p in &rows {
        for y in p..(p + config.line_width).min(height) {
            row_hit[y as usize] = true;
        }
    }

    let mut covered = vec![false; width as usize * height as usize];
    for y in 0..height as usize {
        let base = y * width as usize;
        if row_hit[y] {
            covered[base..base + width as usize].fill(true);
        } else {
            for x in 0..width as usize {
                covered[base + x] = col_hit[x];
            }
        }
    }
    Ok(GridMask {
        width,
        height,
        covered,
    })
}

#[inline]
fn blend_channel(input: u8, grid: u8, alpha: f64) -> u8 {
    let blended = alpha * grid as f64 + (1.0 - alpha) * input as f64;
    // round-half-up, then clamp
    (blended + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Alpha-blends the grid pattern onto a copy of the image. Covered pixels
/// become `round(alpha * color + (1 - alpha) * in)`; uncovered pixels are
/// copied bit-exactly.
pub fn composite(image: &ImageBuffer, config: &GridConfig) -> Result<ImageBuffer, GridError> {
    let mask = render_grid_mask(image.width(), image.height(), config)?;
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.covered(x, y) {
                let p = image.pixel(x, y);
                out.set_pixel(
                    x,
                    y,
                    [
                        blend_channel(p[0], config.color[0], config.alpha),
                        blend_channel(p[1], config.color[1], config.alpha),
                        blend_channel(p[2], config.color[2], config.alpha),
                    ],
                );
            }
        }
    }
    Ok(out)
}
