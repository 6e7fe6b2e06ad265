use thiserror::Error;

use super::background::BackgroundModel;
use super::frame::{Grid, Mask, GRID_SIZE};
use super::interp::InterpolatedFrame;

/// Default segmentation threshold above background, °C.
pub const DEFAULT_DELTA_THRESHOLD_C: f64 = 1.5;
/// Components smaller than this are discarded as noise.
pub const MIN_CLUSTER_PIXELS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("delta threshold must be positive and finite, got {0}")]
    Threshold(f64),
    #[error("mask and excess disagree at ({row}, {col})")]
    Inconsistent { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= self.min_row as f64
            && row <= self.max_row as f64
            && col >= self.min_col as f64
            && col <= self.max_col as f64
    }
}

/// An 8-connected warm region on the upscaled grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Member cells in row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// Sum of excess temperature over member cells (°C·pixel).
    pub mass: f64,
    /// Excess-weighted mean position `(row, col)`.
    pub centroid: (f64, f64),
    pub bbox: BoundingBox,
}

/// Thresholded foreground: `mask` marks cells at least `delta_threshold`
/// above background, `excess` keeps their excess and zeroes the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: Mask,
    pub excess: Grid,
}

pub fn segment(
    frame: &InterpolatedFrame,
    model: &BackgroundModel,
    delta_threshold: f64,
) -> Result<Segmentation, SegmentError> {
    if !(delta_threshold > 0.0 && delta_threshold.is_finite()) {
        return Err(SegmentError::Threshold(delta_threshold));
    }
    let mut mask = [[false; GRID_SIZE]; GRID_SIZE];
    let mut excess = [[0.0; GRID_SIZE]; GRID_SIZE];
    for r in 0..GRID_SIZE {
        for c in 0..GRID_SIZE {
            let d = frame.cells[r][c] - model.cells[r][c];
            if d >= delta_threshold {
                mask[r][c] = true;
                excess[r][c] = d;
            }
        }
    }
    Ok(Segmentation { mask, excess })
}

/// Extracts 8-connected components by flood fill.
///
/// Requires `mask[r][c] == (excess[r][c] > 0)` everywhere. Components with
/// fewer than [`MIN_CLUSTER_PIXELS`] cells are dropped; the rest are ordered
/// by the top-left corner of their bounding box.
pub fn find_clusters(mask: &Mask, excess: &Grid) -> Result<Vec<Cluster>, SegmentError> {
    for r in 0..GRID_SIZE {
        for c in 0..GRID_SIZE {
            let e = excess[r][c];
            if mask[r][c] != (e > 0.0) || !e.is_finite() {
                return Err(SegmentError::Inconsistent { row: r, col: c });
            }
        }
    }

    let mut visited = [[false; GRID_SIZE]; GRID_SIZE];
    let mut stack = Vec::new();
    let mut clusters = Vec::new();
    for r0 in 0..GRID_SIZE {
        for c0 in 0..GRID_SIZE {
            if !mask[r0][c0] || visited[r0][c0] {
                continue;
            }
            let mut pixels = Vec::new();
            visited[r0][c0] = true;
            stack.push((r0, c0));
            while let Some((r, c)) = stack.pop() {
                pixels.push((r, c));
                for nr in r.saturating_sub(1)..=(r + 1).min(GRID_SIZE - 1) {
                    for nc in c.saturating_sub(1)..=(c + 1).min(GRID_SIZE - 1) {
                        if mask[nr][nc] && !visited[nr][nc] {
                            visited[nr][nc] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            if pixels.len() >= MIN_CLUSTER_PIXELS {
                pixels.sort_unstable();
                clusters.push(summarize(pixels, excess));
            }
        }
    }
    clusters.sort_by_key(|c| (c.bbox.min_row, c.bbox.min_col));
    Ok(clusters)
}

fn summarize(pixels: Vec<(usize, usize)>, excess: &Grid) -> Cluster {
    let mut mass = 0.0;
    let (mut sr, mut sc) = (0.0, 0.0);
    let mut bbox = BoundingBox {
        min_row: usize::MAX,
        min_col: usize::MAX,
        max_row: 0,
        max_col: 0,
    };
    for &(r, c) in &pixels {
        let w = excess[r][c];
        mass += w;
        sr += w * r as f64;
        sc += w * c as f64;
        bbox.min_row = bbox.min_row.min(r);
        bbox.min_col = bbox.min_col.min(c);
        bbox.max_row = bbox.max_row.max(r);
        bbox.max_col = bbox.max_col.max(c);
    }
    // Rounding can push a weighted mean a hair past the bbox edge.
    let centroid = (
        (sr / mass).clamp(bbox.min_row as f64, bbox.max_row as f64),
        (sc / mass).clamp(bbox.min_col as f64, bbox.max_col as f64),
    );
    Cluster {
        pixels,
        mass,
        centroid,
        bbox,
    }
}
