//! Thermal frame processing: raw 8x8 frames in, warm-body clusters out.

mod background;
mod cluster;
mod frame;
mod interp;
mod pipeline;

pub use background::{BackgroundModel, BACKGROUND_ALPHA, WARMUP_FRAMES};
pub use cluster::{
    find_clusters, segment, BoundingBox, Cluster, SegmentError, Segmentation,
    DEFAULT_DELTA_THRESHOLD_C, MIN_CLUSTER_PIXELS,
};
pub use frame::{
    is_valid_id, quantize, FrameError, Grid, Mask, SensorCells, ThermalFrame, GRID_SIZE,
    MAX_TEMP_C, MIN_TEMP_C, QUANTUM_C, SENSOR_SIZE, UPSCALE,
};
pub use interp::{
    interpolate_bicubic, kernel, overshoot_factor, source_coord, upscale, InterpolatedFrame,
    KERNEL_A,
};
pub use pipeline::{PipelineConfig, PipelineDiagnostics, PipelineError, SensorPipeline};

/// Maps a source-cell coordinate to the upscaled grid coordinate system.
pub fn to_grid_coord(source: f64) -> f64 {
    (source + 0.5) * UPSCALE as f64 - 0.5
}
