use super::frame::{Grid, Mask, GRID_SIZE};
use super::interp::InterpolatedFrame;

/// EMA rate once the model is warmed up.
pub const BACKGROUND_ALPHA: f64 = 0.02;
/// Frames absorbed as a running mean before occupancy freezing applies.
pub const WARMUP_FRAMES: u32 = 10;

/// Per-cell ambient temperature estimate on the upscaled grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    pub cells: Grid,
    pub frames_absorbed: u32,
}

impl Default for BackgroundModel {
    fn default() -> Self {
        Self {
            cells: [[0.0; GRID_SIZE]; GRID_SIZE],
            frames_absorbed: 0,
        }
    }
}

impl BackgroundModel {
    pub fn is_warm(&self) -> bool {
        self.frames_absorbed >= WARMUP_FRAMES
    }

    /// Absorbs one frame.
    ///
    /// During warm-up the model is the running mean of all frames so far and
    /// the mask is ignored. Afterwards unoccupied cells follow an EMA with
    /// rate [`BACKGROUND_ALPHA`] and occupied cells are frozen.
    pub fn update(&self, frame: &InterpolatedFrame, occupied: &Mask) -> Self {
        let frames_absorbed = self.frames_absorbed.saturating_add(1);
        let warmup = frames_absorbed <= WARMUP_FRAMES;
        let alpha = if warmup {
            1.0 / f64::from(frames_absorbed)
        } else {
            BACKGROUND_ALPHA
        };
        let mut cells = self.cells;
        for r in 0..GRID_SIZE {
            for c in 0..GRID_SIZE {
                if warmup || !occupied[r][c] {
                    cells[r][c] = (1.0 - alpha) * self.cells[r][c] + alpha * frame.cells[r][c];
                }
            }
        }
        Self {
            cells,
            frames_absorbed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: f64) -> InterpolatedFrame {
        InterpolatedFrame {
            cells: [[v; GRID_SIZE]; GRID_SIZE],
            source_seq: 0,
        }
    }

    fn warm_model(v: f64) -> BackgroundModel {
        BackgroundModel {
            cells: [[v; GRID_SIZE]; GRID_SIZE],
            frames_absorbed: WARMUP_FRAMES,
        }
    }

    const EMPTY: Mask = [[false; GRID_SIZE]; GRID_SIZE];

    #[test]
    fn fixed_point() {
        let m = warm_model(20.0).update(&grid(20.0), &EMPTY);
        assert!(m.cells.iter().flatten().all(|&v| v == 20.0));
    }

    #[test]
    fn one_ema_step() {
        let m = warm_model(20.0).update(&grid(25.0), &EMPTY);
        assert!(m.cells.iter().flatten().all(|&v| (v - 20.1).abs() < 1e-12));
    }

    #[test]
    fn occupied_cells_frozen_after_warmup() {
        let mut mask = EMPTY;
        mask[3][4] = true;
        let m = warm_model(20.0).update(&grid(30.0), &mask);
        assert_eq!(m.cells[3][4], 20.0);
        assert!((m.cells[0][0] - 20.2).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_running_mean_and_ignores_mask() {
        let all = [[true; GRID_SIZE]; GRID_SIZE];
        let mut m = BackgroundModel::default();
        for v in [10.0, 20.0, 30.0] {
            m = m.update(&grid(v), &all);
        }
        assert_eq!(m.frames_absorbed, 3);
        assert!(m.cells.iter().flatten().all(|&v| (v - 20.0).abs() < 1e-12));
    }

    #[test]
    fn converges_from_warmup_start() {
        // Iterate the rule numerically: 50 frames at 22.0.
        let mut m = BackgroundModel::default();
        for _ in 0..50 {
            m = m.update(&grid(22.0), &EMPTY);
        }
        assert!(m.cells.iter().flatten().all(|&v| (v - 22.0).abs() < 0.001));
    }
}
