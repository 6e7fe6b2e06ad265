//! Bicubic upscaling of the raw sensor matrix.
//!
//! Output sample `(r, c)` reconstructs the source at
//! `((r + 0.5) / 3 - 0.5, (c + 0.5) / 3 - 0.5)` with the Catmull-Rom kernel
//! (`a = -0.5`). Taps that fall outside the sensor read a linear
//! extrapolation of the two nearest edge cells, so constant and linear
//! fields are reproduced exactly up to the border.

use super::frame::{Grid, SensorCells, ThermalFrame, GRID_SIZE, SENSOR_SIZE, UPSCALE};

/// Catmull-Rom free parameter.
pub const KERNEL_A: f64 = -0.5;

/// 24x24 upscaled temperature field.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatedFrame {
    pub cells: Grid,
    pub source_seq: u64,
}

/// Cubic convolution kernel weight at distance `x`.
pub fn kernel(x: f64) -> f64 {
    let a = KERNEL_A;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source coordinate sampled by output index `i`.
pub fn source_coord(i: usize) -> f64 {
    (i as f64 + 0.5) / UPSCALE as f64 - 0.5
}

/// Weights over real source cells for output index `i`, with out-of-range
/// taps folded onto the edge pair they extrapolate from.
fn weights(i: usize) -> [f64; SENSOR_SIZE] {
    let last = SENSOR_SIZE as isize - 1;
    let x = source_coord(i);
    let base = x.floor() as isize - 1;
    let mut w = [0.0; SENSOR_SIZE];
    for src in base..base + 4 {
        let k = kernel(x - src as f64);
        if src < 0 {
            // s(g) = s0 + g (s1 - s0)
            let g = src as f64;
            w[0] += k * (1.0 - g);
            w[1] += k * g;
        } else if src > last {
            let g = (src - last) as f64;
            w[SENSOR_SIZE - 1] += k * (1.0 + g);
            w[SENSOR_SIZE - 2] -= k * g;
        } else {
            w[src as usize] += k;
        }
    }
    w
}

fn weight_table() -> [[f64; SENSOR_SIZE]; GRID_SIZE] {
    std::array::from_fn(weights)
}

/// Upscales raw sensor cells to the 24x24 grid.
pub fn upscale(src: &SensorCells) -> Grid {
    let table = weight_table();
    // Separable: rows first into a 24x8 buffer, then columns.
    let mut rows = [[0.0; SENSOR_SIZE]; GRID_SIZE];
    for (r, w) in table.iter().enumerate() {
        for c in 0..SENSOR_SIZE {
            rows[r][c] = (0..SENSOR_SIZE)
                .filter(|&k| w[k] != 0.0)
                .map(|k| w[k] * src[k][c])
                .sum();
        }
    }
    let mut out = [[0.0; GRID_SIZE]; GRID_SIZE];
    for r in 0..GRID_SIZE {
        for (c, w) in table.iter().enumerate() {
            out[r][c] = (0..SENSOR_SIZE)
                .filter(|&k| w[k] != 0.0)
                .map(|k| w[k] * rows[r][k])
                .sum();
        }
    }
    out
}

/// Bicubic interpolation of a validated frame.
pub fn interpolate_bicubic(frame: &ThermalFrame) -> InterpolatedFrame {
    InterpolatedFrame {
        cells: upscale(frame.cells()),
        source_seq: frame.seq(),
    }
}

/// Largest total negative 2-D weight over all output positions.
///
/// Output stays within `[min - L*(max-min), max + L*(max-min)]` of the source
/// range where `L` is this value; Catmull-Rom overshoots on sharp edges.
pub fn overshoot_factor() -> f64 {
    let table = weight_table();
    let mut worst: f64 = 0.0;
    for wr in &table {
        for wc in &table {
            let neg: f64 = wr
                .iter()
                .flat_map(|a| wc.iter().map(move |b| a * b))
                .filter(|w| *w < 0.0)
                .sum();
            worst = worst.max(-neg);
        }
    }
    worst
}
