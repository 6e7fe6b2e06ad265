use thiserror::Error;

use super::background::BackgroundModel;
use super::cluster::{find_clusters, segment, Cluster, SegmentError, DEFAULT_DELTA_THRESHOLD_C};
use super::frame::{ThermalFrame, GRID_SIZE};
use super::interp::interpolate_bicubic;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("frame from sensor {got:?} fed to pipeline for {expected:?}")]
    WrongSensor { expected: String, got: String },
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub delta_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            delta_threshold: DEFAULT_DELTA_THRESHOLD_C,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineDiagnostics {
    pub frames_processed: u64,
    pub dropped_out_of_order: u64,
}

/// Per-sensor processing state: background model plus ordering bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorPipeline {
    sensor_id: String,
    config: PipelineConfig,
    background: BackgroundModel,
    last_seq: Option<u64>,
    diagnostics: PipelineDiagnostics,
}

impl SensorPipeline {
    pub fn new(sensor_id: impl Into<String>, config: PipelineConfig) -> Result<Self, PipelineError> {
        if !(config.delta_threshold > 0.0 && config.delta_threshold.is_finite()) {
            return Err(SegmentError::Threshold(config.delta_threshold).into());
        }
        Ok(Self {
            sensor_id: sensor_id.into(),
            config,
            background: BackgroundModel::default(),
            last_seq: None,
            diagnostics: PipelineDiagnostics::default(),
        })
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn background(&self) -> &BackgroundModel {
        &self.background
    }

    pub fn diagnostics(&self) -> PipelineDiagnostics {
        self.diagnostics
    }

    /// Runs interpolate → segment → find_clusters → background update.
    ///
    /// Frames whose seq does not advance are dropped and counted. While the
    /// background is still warming up the room is assumed empty and no
    /// clusters are reported.
    pub fn process_frame(&mut self, frame: &ThermalFrame) -> Result<Vec<Cluster>, PipelineError> {
        if frame.sensor_id() != self.sensor_id {
            return Err(PipelineError::WrongSensor {
                expected: self.sensor_id.clone(),
                got: frame.sensor_id().to_owned(),
            });
        }
        if self.last_seq.is_some_and(|last| frame.seq() <= last) {
            self.diagnostics.dropped_out_of_order += 1;
            return Ok(Vec::new());
        }
        self.last_seq = Some(frame.seq());
        self.diagnostics.frames_processed += 1;

        let upscaled = interpolate_bicubic(frame);
        if !self.background.is_warm() {
            self.background = self
                .background
                .update(&upscaled, &[[false; GRID_SIZE]; GRID_SIZE]);
            return Ok(Vec::new());
        }
        let seg = segment(&upscaled, &self.background, self.config.delta_threshold)?;
        let clusters = find_clusters(&seg.mask, &seg.excess)?;
        self.background = self.background.update(&upscaled, &seg.mask);
        Ok(clusters)
    }
}
