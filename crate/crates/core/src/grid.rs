//! Georeferenced raster grids and the label raster.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ice_labels::{IceClass, IGNORE};

/// North-up affine map from pixel (col, row) to projected coordinates.
/// `pixel_height` is negative for the usual top-down row order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
}

impl GeoTransform {
    pub fn north_up(origin_x: f64, origin_y: f64, pixel_size: f64) -> Self {
        Self {
            origin_x,
            origin_y,
            pixel_width: pixel_size,
            pixel_height: -pixel_size,
        }
    }

    pub fn center_x(&self, col: usize) -> f64 {
        self.origin_x + (col as f64 + 0.5) * self.pixel_width
    }

    pub fn center_y(&self, row: usize) -> f64 {
        self.origin_y + (row as f64 + 0.5) * self.pixel_height
    }

    /// Continuous pixel coordinates where integer values fall on pixel centers.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.pixel_width - 0.5,
            (y - self.origin_y) / self.pixel_height - 0.5,
        )
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            origin_x: self.origin_x + dx,
            origin_y: self.origin_y + dy,
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub transform: GeoTransform,
    /// EPSG code of the projected coordinate system, when known.
    pub epsg: Option<u16>,
}

impl Grid {
    pub fn new(width: usize, height: usize, transform: GeoTransform) -> Self {
        Self {
            width,
            height,
            transform,
            epsg: None,
        }
    }

    pub fn with_epsg(mut self, epsg: u16) -> Self {
        self.epsg = Some(epsg);
        self
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Projected bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let t = &self.transform;
        let x0 = t.origin_x;
        let x1 = t.origin_x + self.width as f64 * t.pixel_width;
        let y0 = t.origin_y;
        let y1 = t.origin_y + self.height as f64 * t.pixel_height;
        (x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
    }

    /// Sub-grid covering `window`.
    pub fn window(&self, window: &Window) -> Grid {
        let t = &self.transform;
        Grid {
            width: window.width,
            height: window.height,
            transform: GeoTransform {
                origin_x: t.origin_x + window.col0 as f64 * t.pixel_width,
                origin_y: t.origin_y + window.row0 as f64 * t.pixel_height,
                ..*t
            },
            epsg: self.epsg,
        }
    }

    pub fn full_window(&self) -> Window {
        Window::new(0, 0, self.height, self.width)
    }
}

/// Rectangular pixel window `[row0, row0+height) x [col0, col0+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn new(row0: usize, col0: usize, height: usize, width: usize) -> Self {
        Self {
            row0,
            col0,
            height,
            width,
        }
    }

    pub fn contains_window(&self, other: &Window) -> bool {
        other.row0 >= self.row0
            && other.col0 >= self.col0
            && other.row0 + other.height <= self.row0 + self.height
            && other.col0 + other.width <= self.col0 + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Copies `window` out of a row-major `width`-wide raster.
pub fn crop<T: Copy>(data: &[T], width: usize, window: &Window) -> Vec<T> {
    let mut out = Vec::with_capacity(window.area());
    for r in window.row0..window.row0 + window.height {
        let start = r * width + window.col0;
        out.extend_from_slice(&data[start..start + window.width]);
    }
    out
}

/// Per-pixel dominant-type codes; every cell is a class code or [`IGNORE`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRaster {
    pub grid: Grid,
    pub codes: Vec<u8>,
}

impl LabelRaster {
    pub const IGNORE_VALUE: u8 = IGNORE;

    pub fn new(grid: Grid, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} label codes for a {}x{} grid",
                codes.len(),
                grid.height,
                grid.width
            )));
        }
        if let Some(&bad) = codes
            .iter()
            .find(|&&c| c != IGNORE && IceClass::from_code(c).is_none())
        {
            return Err(Error::InvalidTarget(bad));
        }
        Ok(Self { grid, codes })
    }

    pub fn filled(grid: Grid, code: u8) -> Self {
        let codes = vec![code; grid.len()];
        Self { grid, codes }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.codes[row * self.grid.width + col]
    }

    pub fn window(&self, window: &Window) -> LabelRaster {
        LabelRaster {
            grid: self.grid.window(window),
            codes: crop(&self.codes, self.grid.width, window),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.codes.iter().filter(|&&c| c != IGNORE).count()
    }
}
