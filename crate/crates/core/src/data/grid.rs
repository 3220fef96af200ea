use serde::{Deserialize, Serialize};

use super::PixelBox;
use crate::error::{Error, Result};

/// Image-plane grid of square cells labelled row-major from 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_px: usize,
    /// `[width, height]` in pixels.
    pub image_size: [u32; 2],
}

impl Default for GridSpec {
    /// 18 × 32 cells of 60 px over a 1920 × 1080 image.
    fn default() -> Self {
        Self {
            rows: 18,
            cols: 32,
            cell_px: 60,
            image_size: [1920, 1080],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.cell_px == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if self.rows * self.cell_px < self.image_size[1] as usize || self.cols * self.cell_px < self.image_size[0] as usize {
            return Err(Error::Config(format!(
                "grid {}x{} of {} px does not cover a {}x{} image",
                self.rows, self.cols, self.cell_px, self.image_size[0], self.image_size[1]
            )));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Pixel center `(x, y)` of a cell.
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (r, c) = (cell / self.cols, cell % self.cols);
        let px = self.cell_px as f64;
        ((c as f64 + 0.5) * px, (r as f64 + 0.5) * px)
    }

    /// Cell whose center is nearest to `(x, y)`; ties go to the smaller index.
    ///
    /// Distance is separable over the axes, so the nearest row and column can be
    /// chosen independently; rounding half down keeps the lower index on ties.
    pub fn cell_of_point(&self, x: f64, y: f64) -> usize {
        let px = self.cell_px as f64;
        let nearest = |v: f64, n: usize| -> usize {
            let k = (v / px - 1.0).ceil();
            (k.max(0.0) as usize).min(n - 1)
        };
        nearest(y, self.rows) * self.cols + nearest(x, self.cols)
    }

    /// Discrete location of a pixel-space box (by its center).
    pub fn discretize(&self, bbox: &PixelBox) -> usize {
        self.cell_of_point((bbox[0] + bbox[2]) / 2.0, (bbox[1] + bbox[3]) / 2.0)
    }
}
