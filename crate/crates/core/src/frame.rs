//! Pixel grids and photon-count frames.
//!
//! Pixel `(r, c)` has its center at `((c + 0.5) * a, (r + 0.5) * a)` where
//! `a` is the pixel side length in nanometres and the origin is the
//! lower-left corner of the frame. Row 0 is the bottom row; pixels are
//! stored row-major, so pixel index `i = r * cols + c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and physical scale of a pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    /// Pixel side length in nm.
    pub pixel_size: f64,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, pixel_size: f64) -> Result<Self> {
        let grid = Grid {
            rows,
            cols,
            pixel_size,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidFrame(format!(
                "grid must have at least one row and column, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.pixel_size.is_finite() && self.pixel_size > 0.0) {
            return Err(Error::InvalidFrame(format!(
                "pixel size must be positive and finite, got {}",
                self.pixel_size
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }

    /// Center of pixel `index` in nm.
    #[inline]
    pub fn center(&self, index: usize) -> (f64, f64) {
        let (r, c) = (index / self.cols, index % self.cols);
        (self.col_center(c), self.row_center(r))
    }

    #[inline]
    pub fn col_center(&self, c: usize) -> f64 {
        (c as f64 + 0.5) * self.pixel_size
    }

    #[inline]
    pub fn row_center(&self, r: usize) -> f64 {
        (r as f64 + 0.5) * self.pixel_size
    }

    /// Physical width of the field of view along x, in nm.
    pub fn width(&self) -> f64 {
        self.cols as f64 * self.pixel_size
    }

    pub fn height(&self) -> f64 {
        self.rows as f64 * self.pixel_size
    }

    /// Half the frame diagonal in nm.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.width().hypot(self.height())
    }
}

/// A rectangular grid of real-valued pixel intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFrame {
    grid: Grid,
    counts: Vec<f64>,
}

impl ImageFrame {
    pub fn new(rows: usize, cols: usize, pixel_size: f64, counts: Vec<f64>) -> Result<Self> {
        Self::from_grid(Grid::new(rows, cols, pixel_size)?, counts)
    }

    pub fn from_grid(grid: Grid, counts: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if counts.len() != grid.len() {
            return Err(Error::InvalidFrame(format!(
                "expected {} counts for a {}x{} grid, got {}",
                grid.len(),
                grid.rows,
                grid.cols,
                counts.len()
            )));
        }
        if let Some(i) = counts.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidFrame(format!(
                "count at pixel {i} is not finite"
            )));
        }
        Ok(ImageFrame { grid, counts })
    }

    /// A frame with every pixel equal to `value`.
    pub fn filled(grid: Grid, value: f64) -> Result<Self> {
        Self::from_grid(grid, vec![value; grid.len()])
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.grid.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.grid.cols
    }

    #[inline]
    pub fn pixel_size(&self) -> f64 {
        self.grid.pixel_size
    }

    #[inline]
    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Count at row `r` (0 = bottom) and column `c`.
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.counts[r * self.grid.cols + c]
    }

    pub fn mean(&self) -> f64 {
        self.counts.iter().sum::<f64>() / self.counts.len() as f64
    }

    pub fn median(&self) -> f64 {
        let mut sorted = self.counts.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }

    /// Returns a frame with the same geometry and new counts.
    pub fn with_counts(&self, counts: Vec<f64>) -> Result<Self> {
        Self::from_grid(self.grid, counts)
    }
}
