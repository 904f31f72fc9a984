//! Heatmaps: spatial saliency grids resized to image resolution and rescaled
//! to `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `[rows, cols]` grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    grid: Tensor,
    zero: bool,
}

impl Heatmap {
    /// Min-max rescales `grid` into a heatmap. A constant nonzero grid maps to
    /// all ones; an all-zero grid stays zero and is flagged.
    pub fn from_grid(grid: &Tensor) -> Result<Self> {
        if grid.rank() != 2 {
            return Err(Error::shape("heatmap", format!("expected [rows, cols], got {:?}", grid.shape())));
        }
        let (lo, hi) = (grid.min(), grid.max());
        let (grid, zero) = if hi > lo {
            (grid.map(|v| (v - lo) / (hi - lo)), false)
        } else if hi != 0.0 {
            (Tensor::ones(grid.shape()), false)
        } else {
            (Tensor::zeros(grid.shape()), true)
        };
        Ok(Heatmap { grid, zero })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    /// True when the source map was identically zero.
    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.grid.at(&[row, col])
    }

    /// Values quantized to bytes, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.grid
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Corner-aligned bilinear resize of a `[rows, cols]` grid: output corners
/// sample input corners exactly.
pub fn resize_bilinear(grid: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    if grid.rank() != 2 || rows == 0 || cols == 0 {
        return Err(Error::shape(
            "resize_bilinear",
            format!("cannot resize {:?} to {rows}x{cols}", grid.shape()),
        ));
    }
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if out == 1 || inp == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let lo = (s.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let src = grid.data();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (r0, r1, fr) = coord(r, rows, h);
        for c in 0..cols {
            let (c0, c1, fc) = coord(c, cols, w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Resizes a nonnegative saliency grid to `(rows, cols)` and min-max rescales it.
pub fn heatmap_from_grid(grid: &Tensor, target: (usize, usize)) -> Result<Heatmap> {
    if grid.rank() != 2 {
        return Err(Error::shape("heatmap", format!("expected [rows, cols], got {:?}", grid.shape())));
    }
    if target.0 < grid.shape()[0] || target.1 < grid.shape()[1] {
        return Err(Error::invalid(format!(
            "target size {target:?} smaller than grid {:?}",
            grid.shape()
        )));
    }
    Heatmap::from_grid(&resize_bilinear(grid, target.0, target.1)?)
}
